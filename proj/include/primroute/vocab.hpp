#pragma once

#include <span>
#include <string>
#include <vector>

namespace primroute {

using Token = int;
using Tokens = std::vector<Token>;

/// Fixed symbol vocabulary shared by every task family.
namespace vocab {

inline constexpr Token kBos = 0;
inline constexpr Token kEos = 1;
inline constexpr Token kEquals = 2;
// Framing prefixes: two "rigorous" variants and two "autopilot" variants.
inline constexpr Token kPositive1 = 3;
inline constexpr Token kPositive2 = 4;
inline constexpr Token kNegative1 = 5;
inline constexpr Token kNegative2 = 6;
inline constexpr Token kSkillBase = 7;    // 6 family markers
inline constexpr Token kDigitBase = 13;   // 0..9
inline constexpr Token kLetterBase = 23;  // 16 letters a..p
inline constexpr int kNumLetters = 16;
inline constexpr Token kFillerBase = 39;  // 8 neutral then 4 distractor fillers
inline constexpr int kNumNeutralFillers = 8;
inline constexpr int kNumDistractorFillers = 4;
inline constexpr int kNumFillers = kNumNeutralFillers + kNumDistractorFillers;
inline constexpr Token kFirstReserved = kFillerBase + kNumFillers;
inline constexpr int kSize = 64;

inline constexpr Token digit(int d) { return kDigitBase + d; }
inline constexpr Token letter(int i) { return kLetterBase + i; }
inline constexpr Token filler(int i) { return kFillerBase + i; }
inline constexpr bool is_frame(Token t) { return t >= kPositive1 && t <= kNegative2; }
inline constexpr bool is_distractor(Token t) {
  return t >= kFillerBase + kNumNeutralFillers && t < kFillerBase + kNumFillers;
}
inline constexpr Token positive_frame(int variant) { return variant % 2 == 0 ? kPositive1 : kPositive2; }
inline constexpr Token negative_frame(int variant) { return variant % 2 == 0 ? kNegative1 : kNegative2; }

std::string name(Token t);
std::string render(std::span<const Token> tokens);

}  // namespace vocab
}  // namespace primroute
