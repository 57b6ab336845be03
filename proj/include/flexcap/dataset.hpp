#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "flexcap/geometry.hpp"
#include "flexcap/vocab.hpp"
#include "flexcap/world.hpp"

namespace flexcap::data {

// Fixed padded token length per training example: LEN + up to 8 words + EOS
// leaves two slack PAD slots.
inline constexpr int kTextLen = 12;
inline constexpr int kMaxNgram = 8;

// One training example: a region plus its length-prefixed caption tokens,
// laid out [LEN_K, w1..wK, EOS, PAD...] padded to kTextLen.
struct Triplet {
    uint64_t scene_seed = 0;
    Box box;
    int len = 0;              // K = word count, 1..8
    std::vector<int> tokens;  // size kTextLen
};

struct Shard {
    std::vector<world::Scene> scenes;
    std::vector<Triplet> triplets;
};

// --- n-gram soup ------------------------------------------------------------

// All contiguous n-grams of the whitespace-tokenized text, enumerated
// length-major: every 1-gram left to right, then every 2-gram, and so on up
// to n_max. Duplicates are retained; empty text gives an empty sequence.
std::vector<std::vector<std::string>> extract_ngrams(const std::string& text,
                                                     int n_max = kMaxNgram);

// Three fixed rules, applied in order: (1) drop n-grams made only of
// uninformative words; (2) drop those starting with a start-stopword;
// (3) drop those ending with an end-stopword. Survivor order preserved.
std::vector<std::vector<std::string>> filter_ngrams(
    const std::vector<std::vector<std::string>>& ngrams);

extern const std::vector<std::string> kUninformativeWords;
extern const std::vector<std::string> kStartStopwords;
extern const std::vector<std::string> kEndStopwords;

// --- n-gram -> box matching -------------------------------------------------

struct Match {
    int object_index = 0;
    std::vector<std::string> words;
};

// Replaceable similarity scorer (detector stand-in): score of an n-gram
// against one object of the scene. Matching accepts score > threshold.
using NgramScorer = std::function<double(
    const std::vector<std::string>&, const world::Scene&, int object_index)>;

// Default exact-rule scorer: 1.0 iff the n-gram's first shape word equals the
// object's shape, every color/size word before it matches the object, any
// region word after "at" matches the object's region, and words after
// "near the" are consistent with the object's nearest neighbor; else 0.0.
double rule_match_score(const std::vector<std::string>& ngram,
                        const world::Scene& scene, int object_index);

// Multi-assignment matching: each n-gram may match several objects; exact
// (object, caption) duplicates are dropped. Order: n-gram major, then object.
std::vector<Match> match_ngrams(const world::Scene& scene,
                                const std::vector<std::vector<std::string>>& ngrams,
                                const NgramScorer& scorer = {},
                                double threshold = 0.1);

// --- triplet assembly -------------------------------------------------------

// Every match becomes one Triplet; additionally, with seeded probability
// p_attr per object, the three attribute-form captions (color/size/shape)
// are injected for that object. Captions longer than max_len-2 words are
// rejected (cannot happen with the n_max=8 grammar).
std::vector<Triplet> build_triplets(const world::Scene& scene,
                                    const std::vector<Match>& matches,
                                    const Vocab& vocab, int max_len = kTextLen,
                                    double p_attr = 0.3, uint64_t seed = 0);

struct BuildConfig {
    int n_max = kMaxNgram;
    double threshold = 0.1;
    double p_attr = 0.3;
    uint64_t seed = 0;  // drives alt-text length choices and attr injection
};

// Seed streams derived from BuildConfig::seed (public so generated shards
// can be audited against their source alt-texts).
uint64_t alt_seed_of(uint64_t shard_seed);
uint64_t attr_seed_of(uint64_t shard_seed);

// Full pipeline over scenes: alt-text -> n-grams -> filter -> match -> triplets.
// Scenes are processed (and stored) in ascending seed order.
Shard build_shard(const std::vector<world::Scene>& scenes, const Vocab& vocab,
                  const BuildConfig& cfg = {});

// --- prefix-sharing statistic -----------------------------------------------

enum class PrefixMode { length_token, bos_token };
enum class PrefixAggregate { per_image_mean, pooled };

// Fraction of unordered caption pairs per box whose conditioned token
// sequences (conditioning token + words, EOS excluded) stand in a proper
// prefix relation. Exact duplicate captions are removed before pairing.
// Throws std::invalid_argument on a shard with no triplets.
double prefix_share_fraction(
    const Shard& shard, PrefixMode mode,
    PrefixAggregate aggregate = PrefixAggregate::per_image_mean);

// --- shard I/O ---------------------------------------------------------------

// Line-delimited JSON, ascending scene seed, each scene followed by its
// triplets; floats at 6 decimals. read_shard validates structure and reports
// the offending line number on malformed input.
void write_shard(const Shard& shard, const std::string& path);
Shard read_shard(const std::string& path);

// Triplet count per target length 1..kMaxLen (index 0 unused).
std::vector<int> length_histogram(const Shard& shard);

}  // namespace flexcap::data
