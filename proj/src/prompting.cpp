#include "modalign/prompting.hpp"

#include <algorithm>
#include <cctype>
#include <utility>
#include <vector>

#include "assets.hpp"
#include "modalign/error.hpp"

namespace modalign {

namespace {

constexpr std::string_view kExplanationMarker = "EXPLANATION:";
constexpr std::string_view kLabelMarker = "LABEL:";

// Replaces {name} placeholders found in the template itself; substituted
// values are never rescanned.
std::string interpolate(std::string_view tmpl, const std::vector<std::pair<std::string_view, std::string_view>>& vars) {
    std::string out;
    out.reserve(tmpl.size() + 256);
    std::size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl[i] == '{') {
            const auto close = tmpl.find('}', i);
            if (close != std::string_view::npos) {
                const auto name = tmpl.substr(i + 1, close - i - 1);
                auto it = std::find_if(vars.begin(), vars.end(), [&](const auto& v) { return v.first == name; });
                if (it != vars.end()) {
                    out += it->second;
                    i = close + 1;
                    continue;
                }
            }
        }
        out.push_back(tmpl[i]);
        ++i;
    }
    return out;
}

std::string_view trim_view(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::string normalize_label(std::string_view text) {
    // first non-empty line
    std::string_view line;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        line = trim_view(text.substr(0, nl));
        if (!line.empty() || nl == std::string_view::npos) break;
        text.remove_prefix(nl + 1);
    }
    while (!line.empty() && std::string_view(".,!;:").find(line.back()) != std::string_view::npos) {
        line.remove_suffix(1);
        line = trim_view(line);
    }
    return std::string(line);
}

}  // namespace

RenderedPrompt render_classification_prompt(const Post& post, const LabelSpace& space) {
    std::string categories;
    std::string definitions;
    for (std::size_t i = 0; i < space.size(); ++i) {
        const auto& entry = space.entries()[i];
        if (i > 0) {
            categories += ", ";
            definitions += '\n';
        }
        categories += entry.name;
        definitions += entry.name + ": " + entry.definition;
    }
    return {interpolate(assets::classification_template(),
                        {{"categories", categories}, {"definitions", definitions}, {"post", post.text}}),
            PromptKind::Classification, post.id, std::nullopt};
}

RenderedPrompt render_conditional_prompt(const Post& post, std::string_view label, std::string_view definition) {
    const std::string block = std::string(label) + ": " + std::string(definition);
    return {interpolate(assets::conditional_template(), {{"definitions", block}, {"post", post.text}}),
            PromptKind::Conditional, post.id, std::string(label)};
}

RenderedPrompt render_conditional_prompt(const Post& post, const LabelSpace& space, std::string_view label) {
    return render_conditional_prompt(post, label, space.definition(label));
}

ParsedResponse parse_response(std::string_view raw, const LabelSpace& space) {
    ParsedResponse parsed;
    parsed.raw = std::string(raw);
    const auto exp_pos = raw.rfind(kExplanationMarker);
    if (exp_pos == std::string_view::npos) return parsed;
    const auto body = raw.substr(exp_pos + kExplanationMarker.size());
    const auto label_pos = body.rfind(kLabelMarker);
    if (label_pos == std::string_view::npos) {
        parsed.explanation = std::string(trim_view(body));
        return parsed;
    }
    parsed.explanation = std::string(trim_view(body.substr(0, label_pos)));
    if (parsed.explanation.empty()) return parsed;
    parsed.label = space.canonical(normalize_label(body.substr(label_pos + kLabelMarker.size())));
    return parsed;
}

std::string format_completion(std::string_view explanation, std::string_view label) {
    std::string out;
    out.reserve(explanation.size() + label.size() + 24);
    out += kExplanationMarker;
    out += ' ';
    out += explanation;
    out += '\n';
    out += kLabelMarker;
    out += ' ';
    out += label;
    return out;
}

SftRecord build_sft_record(const LabeledExample& example, const LabelSpace& space) {
    if (!example.seed_explanation || example.seed_explanation->empty()) {
        throw MissingExplanation("post " + example.post.id + " has no seed explanation");
    }
    return {render_classification_prompt(example.post, space).text,
            format_completion(*example.seed_explanation, example.gold_label)};
}

}  // namespace modalign
