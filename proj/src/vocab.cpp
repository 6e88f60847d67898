#include "primroute/vocab.hpp"

namespace primroute::vocab {

std::string name(Token t) {
  static const char* kFamilies[] = {"ADD", "REV", "PAR", "MAX", "KEY", "SEQ"};
  if (t == kBos) return "<s>";
  if (t == kEos) return "</s>";
  if (t == kEquals) return "=";
  if (t == kPositive1) return "+P1";
  if (t == kPositive2) return "+P2";
  if (t == kNegative1) return "-N1";
  if (t == kNegative2) return "-N2";
  if (t >= kSkillBase && t < kDigitBase) return kFamilies[t - kSkillBase];
  if (t >= kDigitBase && t < kLetterBase) return std::string(1, static_cast<char>('0' + t - kDigitBase));
  if (t >= kLetterBase && t < kFillerBase) return std::string(1, static_cast<char>('a' + t - kLetterBase));
  if (t >= kFillerBase && t < kFillerBase + kNumNeutralFillers) return "~" + std::to_string(t - kFillerBase);
  if (is_distractor(t)) return "!" + std::to_string(t - kFillerBase - kNumNeutralFillers);
  if (t >= kFirstReserved && t < kSize) return "<r" + std::to_string(t - kFirstReserved) + ">";
  return "<?" + std::to_string(t) + ">";
}

std::string render(std::span<const Token> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += name(tokens[i]);
  }
  return out;
}

}  // namespace primroute::vocab
