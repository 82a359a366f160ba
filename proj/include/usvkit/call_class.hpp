#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace usv {

/// The five vocalization categories. Indices are stable and used as network
/// output positions.
enum class CallClass : int { Flat = 0, Modulated = 1, FrequencyStep = 2, Composite = 3, Short = 4 };

inline constexpr std::size_t kNumClasses = 5;

inline constexpr std::array<CallClass, kNumClasses> kAllClasses = {
    CallClass::Flat, CallClass::Modulated, CallClass::FrequencyStep, CallClass::Composite,
    CallClass::Short};

inline constexpr int index_of(CallClass c) { return static_cast<int>(c); }

inline CallClass class_from_index(int i) {
  if (i < 0 || i >= static_cast<int>(kNumClasses))
    throw std::out_of_range("call class index out of range: " + std::to_string(i));
  return static_cast<CallClass>(i);
}

inline std::string_view class_name(CallClass c) {
  switch (c) {
    case CallClass::Flat: return "Flat";
    case CallClass::Modulated: return "Modulated";
    case CallClass::FrequencyStep: return "FrequencyStep";
    case CallClass::Composite: return "Composite";
    case CallClass::Short: return "Short";
  }
  return "?";
}

inline std::optional<CallClass> parse_class(std::string_view s) {
  for (auto c : kAllClasses)
    if (class_name(c) == s) return c;
  return std::nullopt;
}

}  // namespace usv
