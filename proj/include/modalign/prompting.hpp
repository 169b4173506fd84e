#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "modalign/corpus.hpp"

namespace modalign {

enum class PromptKind { Classification, Conditional, SftTarget };

struct RenderedPrompt {
    std::string text;
    PromptKind kind = PromptKind::Classification;
    std::string post_id;
    std::optional<std::string> conditioned_label;
};

/// What gets reported in place of a label when a completion cannot be parsed.
inline constexpr std::string_view kInvalidLabel = "INVALID";

struct ParsedResponse {
    std::string explanation;
    /// Canonical label, or nullopt for an unparseable completion.
    std::optional<std::string> label;
    std::string raw;

    bool valid() const noexcept { return label.has_value(); }
    std::string_view label_or_invalid() const { return label ? std::string_view(*label) : kInvalidLabel; }
};

/// Classification prompt listing every label and its definition.
RenderedPrompt render_classification_prompt(const Post& post, const LabelSpace& space);

/// Prompt asking for an explanation of why `post` carries `label`.
/// Throws UnknownLabel if `label` is not in `space`.
RenderedPrompt render_conditional_prompt(const Post& post, const LabelSpace& space, std::string_view label);
RenderedPrompt render_conditional_prompt(const Post& post, std::string_view label, std::string_view definition);

/// Completion grammar:
///
///     ... EXPLANATION: <explanation> LABEL: <label>[trailing lines]
///
/// The last EXPLANATION: marker wins (models sometimes echo the
/// instructions). The label is the first non-empty line after the last
/// LABEL: marker, trimmed, with trailing .,!;: removed and matched to the
/// label space case-insensitively. Never throws.
ParsedResponse parse_response(std::string_view raw, const LabelSpace& space);

/// "EXPLANATION: <explanation>\nLABEL: <label>"
std::string format_completion(std::string_view explanation, std::string_view label);

struct SftRecord {
    std::string prompt;
    std::string completion;
};

/// Throws MissingExplanation if the example has no seed explanation.
SftRecord build_sft_record(const LabeledExample& example, const LabelSpace& space);

}  // namespace modalign
