#include "modalign/hyperparams.hpp"

#include <cctype>

namespace modalign {

namespace {

std::string lower_alnum(std::string_view text, char sep) {
    std::string out;
    for (char c : text) {
        const auto u = static_cast<unsigned char>(c);
        if (std::isalnum(u)) {
            out += static_cast<char>(std::tolower(u));
        } else if (!out.empty() && out.back() != sep) {
            out += sep;
        }
    }
    while (!out.empty() && out.back() == sep) out.pop_back();
    return out;
}

struct Row {
    const char* task;
    int k;
    const char* technique;
    int t5_epochs;
    double t5_lr;
    int llama_epochs;
    double llama_lr;
};

// t5_epochs == 0 marks a technique without a T5 entry.
constexpr Row kPublished[] = {
    {"hatexplain", 16, "DPO", 3, 5e-05, 3, 1e-05},
    {"hatexplain", 32, "DPO", 3, 5e-05, 4, 1e-05},
    {"hatexplain", 64, "DPO", 3, 1e-05, 3, 1e-05},
    {"hatexplain", 128, "DPO", 3, 5e-05, 3, 1e-05},
    {"hatexplain", 256, "DPO", 4, 1e-04, 3, 1e-05},
    {"hatexplain", 256, "KTO", 0, 0.0, 3, 5e-07},
    {"hatexplain", 256, "DPO-K128", 3, 1e-05, 4, 1e-04},
    {"hatexplain", 256, "DPO-K192", 3, 1e-04, 1, 7e-05},
    {"hatexplain", 256, "DPO-N128", 3, 5e-05, 5, 5e-06},
    {"hatexplain", 256, "DPO-N192", 3, 5e-05, 5, 5e-06},

    {"latent_hate", 16, "DPO", 3, 5e-05, 3, 1e-06},
    {"latent_hate", 32, "DPO", 3, 1e-04, 3, 1e-06},
    {"latent_hate", 64, "DPO", 3, 5e-05, 3, 1e-06},
    {"latent_hate", 128, "DPO", 4, 5e-05, 3, 1e-04},
    {"latent_hate", 256, "DPO", 3, 1e-04, 3, 1e-04},
    {"latent_hate", 256, "KTO", 0, 0.0, 3, 5e-07},
    {"latent_hate", 256, "DPO-K128", 4, 1e-04, 4, 1e-04},
    {"latent_hate", 256, "DPO-K192", 3, 1e-04, 3, 1e-04},
    {"latent_hate", 256, "DPO-N128", 4, 1e-04, 3, 1e-04},
    {"latent_hate", 256, "DPO-N192", 4, 1e-04, 5, 1e-04},

    {"implicit_hate", 16, "DPO", 3, 5e-05, 3, 5e-06},
    {"implicit_hate", 32, "DPO", 3, 5e-05, 4, 5e-05},
    {"implicit_hate", 64, "DPO", 3, 1e-04, 3, 1e-06},
    {"implicit_hate", 128, "DPO", 1, 7e-05, 3, 1e-04},
    {"implicit_hate", 256, "DPO", 1, 5e-05, 1, 5e-05},
    {"implicit_hate", 256, "KTO", 0, 0.0, 3, 5e-07},
    {"implicit_hate", 256, "DPO-K128", 1, 7e-05, 1, 1e-05},
    {"implicit_hate", 256, "DPO-K192", 1, 7e-05, 1, 5e-05},
    {"implicit_hate", 256, "DPO-N128", 1, 7e-05, 1, 1e-05},
    {"implicit_hate", 256, "DPO-N192", 1, 7e-05, 1, 5e-05},
};

}  // namespace

HyperparameterRegistry::HyperparameterRegistry() {
    defaults_["SFT"] = {3, 3e-4};
    defaults_["DPO"] = {3, 5e-5};
    defaults_["KTO"] = {3, 5e-7};
}

HyperparameterRegistry HyperparameterRegistry::published() {
    HyperparameterRegistry registry;
    for (const auto& row : kPublished) {
        if (row.t5_epochs > 0) registry.set(row.task, "t5", row.k, row.technique, {row.t5_epochs, row.t5_lr});
        registry.set(row.task, "llama", row.k, row.technique, {row.llama_epochs, row.llama_lr});
    }
    return registry;
}

std::string HyperparameterRegistry::normalize_task(std::string_view task) { return lower_alnum(task, '_'); }

std::string HyperparameterRegistry::normalize_family(std::string_view family) {
    const auto norm = lower_alnum(family, '-');
    if (norm.find("llama") != std::string::npos) return "llama";
    if (norm.find("t5") != std::string::npos) return "t5";
    return norm;
}

std::string HyperparameterRegistry::normalize_technique(std::string_view technique) {
    std::string out;
    for (char c : technique) {
        const auto u = static_cast<unsigned char>(c);
        if (std::isalnum(u)) out += static_cast<char>(std::toupper(u));
        else if (c == '-' || c == '_') out += '-';
    }
    return out;
}

void HyperparameterRegistry::set(std::string_view task, std::string_view family, int k, std::string_view technique,
                                 Hyperparameters value) {
    entries_[Key{normalize_task(task), normalize_family(family), k, normalize_technique(technique)}] = value;
}

void HyperparameterRegistry::set_default(std::string_view technique, Hyperparameters value) {
    defaults_[normalize_technique(technique)] = value;
}

std::optional<Hyperparameters> HyperparameterRegistry::find(std::string_view task, std::string_view family, int k,
                                                            std::string_view technique) const {
    const auto it = entries_.find(Key{normalize_task(task), normalize_family(family), k, normalize_technique(technique)});
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

Hyperparameters HyperparameterRegistry::default_for(std::string_view technique) const {
    auto tech = normalize_technique(technique);
    if (tech == "XSFT") tech = "SFT";
    if (const auto it = defaults_.find(tech); it != defaults_.end()) return it->second;
    return defaults_.at("DPO");
}

Hyperparameters HyperparameterRegistry::lookup(std::string_view task, std::string_view family, int k,
                                               std::string_view technique) const {
    if (auto hit = find(task, family, k, technique)) return *hit;
    const auto tech = normalize_technique(technique);
    if (tech == "XDPO") {
        if (auto hit = find(task, family, k, "DPO")) return *hit;
    } else if (tech == "XSFT") {
        if (auto hit = find(task, family, k, "SFT")) return *hit;
    }
    return default_for(tech);
}

Hyperparameters lookup_hyperparameters(const HyperparameterRegistry& registry, std::string_view task,
                                       std::string_view family, int k, std::string_view technique) {
    return registry.lookup(task, family, k, technique);
}

}  // namespace modalign
