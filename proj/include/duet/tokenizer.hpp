#pragma once

#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "duet/error.hpp"

namespace duet {

// Reserved vocabulary slots, fixed across save/load.
enum SpecialToken : int {
  kPadId = 0,
  kBosId = 1,
  kEosId = 2,
  kMaskId = 3,
  kTaskLmId = 4,
  kTaskMlmId = 5,
  kTaskPredId = 6,
  kNumSpecialTokens = 7,
};

inline const std::vector<std::string>& special_token_surfaces() {
  static const std::vector<std::string> surfaces = {
      "<pad>", "<bos>", "<eos>", "<mask>", "<lm>", "<mlm>", "<pred>"};
  return surfaces;
}

// Character-level SMILES segmentation. Bracket atoms, the two-character
// elements Cl and Br, and %NN ring closures are single tokens; everything
// else splits per character.
inline std::vector<std::string> segment_smiles(const std::string& smiles) {
  if (smiles.empty()) throw TokenError("segment_smiles: empty input");
  std::vector<std::string> tokens;
  size_t i = 0;
  while (i < smiles.size()) {
    const char c = smiles[i];
    if (c == '[') {
      const size_t close = smiles.find(']', i);
      if (close == std::string::npos)
        throw TokenError("segment_smiles: unterminated bracket atom");
      tokens.push_back(smiles.substr(i, close - i + 1));
      i = close + 1;
    } else if ((c == 'C' && i + 1 < smiles.size() && smiles[i + 1] == 'l') ||
               (c == 'B' && i + 1 < smiles.size() && smiles[i + 1] == 'r')) {
      tokens.push_back(smiles.substr(i, 2));
      i += 2;
    } else if (c == '%') {
      if (i + 2 >= smiles.size() || !std::isdigit(static_cast<unsigned char>(smiles[i + 1])) ||
          !std::isdigit(static_cast<unsigned char>(smiles[i + 2])))
        throw TokenError("segment_smiles: % must be followed by two digits");
      tokens.push_back(smiles.substr(i, 3));
      i += 3;
    } else {
      tokens.push_back(std::string(1, c));
      i += 1;
    }
  }
  return tokens;
}

// Tokenized sequence: BOS + tokens + EOS, optionally padded with a suffix
// of PAD ids. `length` counts ids excluding padding.
struct TokenSequence {
  std::vector<int> ids;
  int length = 0;

  int content_length() const { return length - 2; }  // without BOS/EOS

  void pad_to(int n) {
    if (n < static_cast<int>(ids.size()))
      throw ValueError("TokenSequence::pad_to: shorter than current ids");
    ids.resize(static_cast<size_t>(n), kPadId);
  }
};

class Vocabulary {
 public:
  Vocabulary() {
    for (const auto& s : special_token_surfaces()) append(s);
  }

  // Builds the token set from corpus lines, in order of first appearance.
  // Lines that fail segmentation are skipped; ingestion reports them.
  static Vocabulary from_corpus(const std::vector<std::string>& lines) {
    Vocabulary v;
    for (const auto& line : lines) {
      std::vector<std::string> toks;
      try {
        toks = segment_smiles(line);
      } catch (const TokenError&) {
        continue;
      }
      for (const auto& t : toks)
        if (v.token_to_id_.find(t) == v.token_to_id_.end()) v.append(t);
    }
    return v;
  }

  int size() const { return static_cast<int>(id_to_token_.size()); }

  bool contains(const std::string& token) const {
    return token_to_id_.find(token) != token_to_id_.end();
  }

  int id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    if (it == token_to_id_.end())
      throw TokenError("unknown token '" + token + "' (outside vocabulary)");
    return it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw TokenError("token id out of range");
    return id_to_token_[static_cast<size_t>(id)];
  }

  static bool is_special(int id) { return id >= 0 && id < kNumSpecialTokens; }

  // BOS + token ids + EOS; max_len bounds the id count including BOS/EOS.
  TokenSequence tokenize(const std::string& smiles, int max_len = 0) const {
    const auto toks = segment_smiles(smiles);
    if (max_len > 0 && static_cast<int>(toks.size()) + 2 > max_len)
      throw TokenError("sequence longer than maximum length");
    TokenSequence seq;
    seq.ids.reserve(toks.size() + 2);
    seq.ids.push_back(kBosId);
    for (const auto& t : toks) seq.ids.push_back(id(t));
    seq.ids.push_back(kEosId);
    seq.length = static_cast<int>(seq.ids.size());
    return seq;
  }

  // Concatenates surface tokens, stripping all special ids.
  std::string detokenize(const TokenSequence& seq) const {
    std::string out;
    for (int token_id : seq.ids) {
      if (token_id < 0 || token_id >= size()) throw TokenError("token id out of range");
      if (is_special(token_id)) continue;
      out += id_to_token_[static_cast<size_t>(token_id)];
    }
    return out;
  }

  std::string detokenize_ids(const std::vector<int>& ids) const {
    TokenSequence seq;
    seq.ids = ids;
    seq.length = static_cast<int>(ids.size());
    return detokenize(seq);
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (int i = 0; i < size(); ++i) j[id_to_token_[static_cast<size_t>(i)]] = i;
    return j;
  }

  static Vocabulary from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw TokenError("vocabulary json must be an object");
    std::vector<std::string> by_id(j.size());
    for (auto it = j.begin(); it != j.end(); ++it) {
      const int id = it.value().get<int>();
      if (id < 0 || id >= static_cast<int>(j.size()))
        throw TokenError("vocabulary json: id out of range");
      if (!by_id[static_cast<size_t>(id)].empty())
        throw TokenError("vocabulary json: duplicate id");
      by_id[static_cast<size_t>(id)] = it.key();
    }
    const auto& specials = special_token_surfaces();
    if (by_id.size() < specials.size()) throw TokenError("vocabulary json: missing specials");
    for (size_t i = 0; i < specials.size(); ++i)
      if (by_id[i] != specials[i])
        throw TokenError("vocabulary json: reserved id mismatch for " + specials[i]);
    Vocabulary v;
    for (size_t i = specials.size(); i < by_id.size(); ++i) v.append(by_id[i]);
    return v;
  }

 private:
  void append(const std::string& token) {
    token_to_id_[token] = size();
    id_to_token_.push_back(token);
  }

  std::map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

}  // namespace duet
