#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace flexcap {

// Token table. Ids are frozen:
//   0 PAD, 1 EOS, 2 BOS, 3..10 LEN_1..LEN_8,
//   11.. lexicon words in ascending lexicographic order.
struct Vocab {
    static constexpr int kPad = 0;
    static constexpr int kEos = 1;
    static constexpr int kBos = 2;
    static constexpr int kLenBase = 3;   // LEN_k = kLenBase + k - 1
    static constexpr int kMaxLen = 8;
    static constexpr int kFirstWord = 11;

    std::vector<std::string> id_to_name;           // every id, special incl.
    std::unordered_map<std::string, int> word_ids;  // lexicon words only

    static Vocab build();  // the fixed world lexicon

    int size() const { return static_cast<int>(id_to_name.size()); }

    static int len_token(int k);          // k in 1..8, else throws
    static bool is_len_token(int id) { return id >= kLenBase && id < kLenBase + kMaxLen; }
    static int len_of(int id);            // inverse of len_token, else throws
    bool is_word(int id) const { return id >= kFirstWord && id < size(); }

    int word_id(const std::string& word) const;  // throws on unknown word
    const std::string& name(int id) const;       // display name for any id

    std::vector<int> encode(const std::vector<std::string>& words) const;
    // Lexicon ids -> words; non-word ids are rejected (throws).
    std::vector<std::string> decode_words(const std::vector<int>& ids) const;
};

}  // namespace flexcap
