#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>

namespace modalign {

struct Hyperparameters {
    int epochs = 3;
    double learning_rate = 5e-5;

    bool operator==(const Hyperparameters&) const = default;
};

/// (task, model family, K, technique) -> (epochs, learning rate).
///
/// Keys are normalized: tasks to their built-in key ("HateXplain" ->
/// "hatexplain", "Latent Hate" -> "latent_hate"), families and techniques
/// to lower/upper case. Lookups never fail; a missing entry resolves to the
/// default of its technique.
class HyperparameterRegistry {
public:
    /// Empty registry with the technique defaults only.
    HyperparameterRegistry();

    /// Registry holding the published per-task tables for the t5 and llama families.
    static HyperparameterRegistry published();

    void set(std::string_view task, std::string_view family, int k, std::string_view technique,
             Hyperparameters value);
    void set_default(std::string_view technique, Hyperparameters value);

    std::optional<Hyperparameters> find(std::string_view task, std::string_view family, int k,
                                        std::string_view technique) const;

    /// SFT (3, 3e-4), DPO (3, 5e-5), KTO (3, 5e-7). XSFT uses the SFT default;
    /// XDPO, DPO-K*/DPO-N* and unknown techniques the DPO default.
    Hyperparameters default_for(std::string_view technique) const;

    Hyperparameters lookup(std::string_view task, std::string_view family, int k, std::string_view technique) const;

    std::size_t size() const noexcept { return entries_.size(); }

    static std::string normalize_task(std::string_view task);
    static std::string normalize_family(std::string_view family);
    static std::string normalize_technique(std::string_view technique);

private:
    using Key = std::tuple<std::string, std::string, int, std::string>;
    std::map<Key, Hyperparameters> entries_;
    std::map<std::string, Hyperparameters> defaults_;
};

/// Exact entry if present; XDPO falls back to the DPO entry at the same K
/// and XSFT to the SFT entry before the technique default is used.
Hyperparameters lookup_hyperparameters(const HyperparameterRegistry& registry, std::string_view task,
                                       std::string_view family, int k, std::string_view technique);

}  // namespace modalign
