#pragma once

#include <string_view>

// Files under data/ compiled into the library (see assets.cpp.in).
namespace modalign::assets {

std::string_view classification_template();
std::string_view conditional_template();
/// Task JSON for a built-in key; empty when the key is unknown.
std::string_view task_json(std::string_view key);

}  // namespace modalign::assets
