#include "flexcap/vocab.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include "flexcap/world.hpp"

namespace flexcap {

Vocab Vocab::build() {
    Vocab v;
    v.id_to_name = {"<pad>", "<eos>", "<bos>"};
    for (int k = 1; k <= kMaxLen; ++k)
        v.id_to_name.push_back("<len_" + std::to_string(k) + ">");

    // Lexicon: every word the grammar can emit, deduped, sorted ascending.
    std::set<std::string> words;
    for (auto* w : world::kShapeWords) words.insert(w);
    for (auto* w : world::kColorWords) words.insert(w);
    for (auto* w : world::kSizeWords) words.insert(w);
    for (auto* w : world::kRegionWords) words.insert(w);
    for (auto* w : {"at", "near", "the", "and"}) words.insert(w);
    for (auto* w : {"color", "size", "shape", "is"}) words.insert(w);

    for (const auto& w : words) {
        v.word_ids[w] = static_cast<int>(v.id_to_name.size());
        v.id_to_name.push_back(w);
    }
    return v;
}

int Vocab::len_token(int k) {
    if (k < 1 || k > kMaxLen)
        throw std::invalid_argument("len_token: k must be in 1..8");
    return kLenBase + k - 1;
}

int Vocab::len_of(int id) {
    if (!is_len_token(id))
        throw std::invalid_argument("len_of: not a length token");
    return id - kLenBase + 1;
}

int Vocab::word_id(const std::string& word) const {
    auto it = word_ids.find(word);
    if (it == word_ids.end())
        throw std::invalid_argument("unknown word: " + word);
    return it->second;
}

const std::string& Vocab::name(int id) const {
    if (id < 0 || id >= size())
        throw std::out_of_range("token id out of range: " + std::to_string(id));
    return id_to_name[id];
}

std::vector<int> Vocab::encode(const std::vector<std::string>& words) const {
    std::vector<int> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(word_id(w));
    return ids;
}

std::vector<std::string> Vocab::decode_words(const std::vector<int>& ids) const {
    std::vector<std::string> words;
    words.reserve(ids.size());
    for (int id : ids) {
        if (!is_word(id))
            throw std::invalid_argument("decode_words: id " +
                                        std::to_string(id) + " is not a word");
        words.push_back(id_to_name[id]);
    }
    return words;
}

}  // namespace flexcap
