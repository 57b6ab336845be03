#include "flexcap/dataset.hpp"

#include <algorithm>
#include <cassert>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include "flexcap/rng.hpp"
#include "json.hpp"

namespace flexcap::data {

const std::vector<std::string> kUninformativeWords = {
    "image", "photo", "picture", "and", "the", "a",
    "at",    "near",  "of",      "in",  "on",  "is"};
const std::vector<std::string> kStartStopwords = {
    "of", "on", "in", "at", "the", "and", "a", "an", "near", "is", "to", "with"};
const std::vector<std::string> kEndStopwords = {
    "a", "an", "the", "to", "on", "at", "and", "near", "of", "in", "with", "is"};

namespace {

bool in_list(const std::vector<std::string>& list, const std::string& w) {
    return std::find(list.begin(), list.end(), w) != list.end();
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream ss(text);
    std::string w;
    while (ss >> w) words.push_back(w);
    return words;
}

std::string join_words(const std::vector<std::string>& words) {
    std::string s;
    for (size_t i = 0; i < words.size(); ++i) {
        if (i) s += ' ';
        s += words[i];
    }
    return s;
}

}  // namespace

std::vector<std::vector<std::string>> extract_ngrams(const std::string& text,
                                                     int n_max) {
    std::vector<std::string> words = split_words(text);
    std::vector<std::vector<std::string>> out;
    int len = static_cast<int>(words.size());
    // length-major: all 1-grams left to right, then all 2-grams, ...
    for (int n = 1; n <= n_max && n <= len; ++n) {
        for (int start = 0; start + n <= len; ++start) {
            out.emplace_back(words.begin() + start, words.begin() + start + n);
        }
    }
    return out;
}

std::vector<std::vector<std::string>> filter_ngrams(
    const std::vector<std::vector<std::string>>& ngrams) {
    std::vector<std::vector<std::string>> out;
    for (const auto& ng : ngrams) {
        if (ng.empty()) continue;
        bool all_uninformative = true;
        for (const auto& w : ng) {
            if (!in_list(kUninformativeWords, w)) {
                all_uninformative = false;
                break;
            }
        }
        if (all_uninformative) continue;                  // rule 1
        if (in_list(kStartStopwords, ng.front())) continue;  // rule 2
        if (in_list(kEndStopwords, ng.back())) continue;      // rule 3
        out.push_back(ng);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matching oracle
// ---------------------------------------------------------------------------

namespace {

int shape_index(const std::string& w) {
    for (int i = 0; i < world::kNumShapes; ++i)
        if (w == world::kShapeWords[i]) return i;
    return -1;
}
int color_index(const std::string& w) {
    for (int i = 0; i < world::kNumColors; ++i)
        if (w == world::kColorWords[i]) return i;
    return -1;
}
int size_index(const std::string& w) {
    for (int i = 0; i < world::kNumSizes; ++i)
        if (w == world::kSizeWords[i]) return i;
    return -1;
}
}  // namespace

double rule_match_score(const std::vector<std::string>& ngram,
                        const world::Scene& scene, int object_index) {
    const auto& obj = scene.objects[object_index];

    // locate the first shape word; none -> no match
    int first_shape_pos = -1;
    for (int i = 0; i < static_cast<int>(ngram.size()); ++i) {
        if (shape_index(ngram[i]) >= 0) {
            first_shape_pos = i;
            break;
        }
    }
    if (first_shape_pos < 0) return 0.0;
    if (shape_index(ngram[first_shape_pos]) != static_cast<int>(obj.shape))
        return 0.0;

    // attributes preceding the shape must agree with the object
    for (int i = 0; i < first_shape_pos; ++i) {
        int c = color_index(ngram[i]);
        if (c >= 0 && c != static_cast<int>(obj.color)) return 0.0;
        int s = size_index(ngram[i]);
        if (s >= 0 && s != static_cast<int>(obj.size)) return 0.0;
    }

    // "at REGION": the word after every "at" must name the object's region
    std::string region = world::region_word(obj.cx, obj.cy);
    for (int i = 0; i + 1 < static_cast<int>(ngram.size()); ++i) {
        if (ngram[i] == "at" && ngram[i + 1] != region) return 0.0;
    }

    // "near the ...": everything after must describe the nearest neighbor
    for (int i = 0; i + 1 < static_cast<int>(ngram.size()); ++i) {
        if (ngram[i] != "near" || ngram[i + 1] != "the") continue;
        int nb = world::nearest_neighbor(scene, object_index);
        if (nb < 0) return 0.0;
        const auto& other = scene.objects[nb];
        for (int j = i + 2; j < static_cast<int>(ngram.size()); ++j) {
            int sh = shape_index(ngram[j]);
            if (sh >= 0) {
                if (sh != static_cast<int>(other.shape)) return 0.0;
                continue;
            }
            int c = color_index(ngram[j]);
            if (c >= 0) {
                if (c != static_cast<int>(other.color)) return 0.0;
                continue;
            }
            int s = size_index(ngram[j]);
            if (s >= 0 && s != static_cast<int>(other.size)) return 0.0;
        }
        break;  // clause checked once; grammar emits at most one
    }
    return 1.0;
}

std::vector<Match> match_ngrams(
    const world::Scene& scene,
    const std::vector<std::vector<std::string>>& ngrams,
    const NgramScorer& scorer, double threshold) {
    const NgramScorer& score = scorer ? scorer : NgramScorer(rule_match_score);
    std::vector<Match> out;
    std::set<std::pair<int, std::string>> seen;
    for (const auto& ng : ngrams) {
        for (int oi = 0; oi < static_cast<int>(scene.objects.size()); ++oi) {
            if (score(ng, scene, oi) <= threshold) continue;
            auto key = std::make_pair(oi, join_words(ng));
            if (!seen.insert(key).second) continue;  // exact duplicate
            out.push_back({oi, ng});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Triplet assembly
// ---------------------------------------------------------------------------

namespace {

Triplet make_triplet(const world::Scene& scene, int object_index,
                     const std::vector<std::string>& words, const Vocab& vocab,
                     int max_len) {
    Triplet t;
    t.scene_seed = scene.seed;
    t.box = scene.objects[object_index].box();
    t.len = static_cast<int>(words.size());
    t.tokens.assign(max_len, Vocab::kPad);
    t.tokens[0] = Vocab::len_token(t.len);
    for (int i = 0; i < t.len; ++i) t.tokens[1 + i] = vocab.word_id(words[i]);
    t.tokens[1 + t.len] = Vocab::kEos;
    return t;
}

}  // namespace

std::vector<Triplet> build_triplets(const world::Scene& scene,
                                    const std::vector<Match>& matches,
                                    const Vocab& vocab, int max_len,
                                    double p_attr, uint64_t seed) {
    std::vector<Triplet> out;
    for (const auto& m : matches) {
        int k = static_cast<int>(m.words.size());
        assert(k <= max_len - 2 && "caption too long for padded layout");
        if (k < 1 || k > max_len - 2 || k > Vocab::kMaxLen) continue;
        out.push_back(make_triplet(scene, m.object_index, m.words, vocab, max_len));
    }
    Rng rng(mix_seed(seed, scene.seed));
    for (int oi = 0; oi < static_cast<int>(scene.objects.size()); ++oi) {
        if (!rng.bernoulli(p_attr)) continue;
        for (auto form : {world::AttrForm::color, world::AttrForm::size,
                          world::AttrForm::shape}) {
            auto words = world::attribute_caption(scene.objects[oi], form);
            out.push_back(make_triplet(scene, oi, words, vocab, max_len));
        }
    }
    return out;
}

uint64_t alt_seed_of(uint64_t shard_seed) { return mix_seed(shard_seed, 0xA17); }
uint64_t attr_seed_of(uint64_t shard_seed) { return mix_seed(shard_seed, 0xA772); }

Shard build_shard(const std::vector<world::Scene>& scenes, const Vocab& vocab,
                  const BuildConfig& cfg) {
    Shard shard;
    shard.scenes = scenes;
    std::stable_sort(shard.scenes.begin(), shard.scenes.end(),
                     [](const world::Scene& a, const world::Scene& b) {
                         return a.seed < b.seed;
                     });
    uint64_t alt_seed = alt_seed_of(cfg.seed);
    uint64_t attr_seed = attr_seed_of(cfg.seed);
    for (const auto& scene : shard.scenes) {
        auto ngrams = filter_ngrams(
            extract_ngrams(world::alt_text(scene, alt_seed), cfg.n_max));
        auto matches = match_ngrams(scene, ngrams, {}, cfg.threshold);
        auto triplets = build_triplets(scene, matches, vocab, kTextLen,
                                       cfg.p_attr, attr_seed);
        shard.triplets.insert(shard.triplets.end(), triplets.begin(),
                              triplets.end());
    }
    return shard;
}

// ---------------------------------------------------------------------------
// Prefix-sharing statistic
// ---------------------------------------------------------------------------

namespace {

bool proper_prefix(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() >= b.size()) return false;
    return std::equal(a.begin(), a.end(), b.begin());
}

// words of a triplet (between LEN and EOS)
std::vector<int> word_ids_of(const Triplet& t) {
    return {t.tokens.begin() + 1, t.tokens.begin() + 1 + t.len};
}

}  // namespace

double prefix_share_fraction(const Shard& shard, PrefixMode mode,
                             PrefixAggregate aggregate) {
    if (shard.triplets.empty())
        throw std::invalid_argument("prefix_share_fraction: empty shard");

    // group conditioned sequences by (scene, box)
    using BoxKey = std::tuple<uint64_t, double, double, double, double>;
    std::map<BoxKey, std::vector<std::vector<int>>> groups;
    for (const auto& t : shard.triplets) {
        std::vector<int> seq;
        seq.push_back(mode == PrefixMode::length_token ? Vocab::len_token(t.len)
                                                       : Vocab::kBos);
        auto words = word_ids_of(t);
        seq.insert(seq.end(), words.begin(), words.end());
        groups[{t.scene_seed, t.box.cx, t.box.cy, t.box.w, t.box.h}].push_back(
            std::move(seq));
    }

    std::map<uint64_t, std::pair<long, long>> per_scene;  // seed -> (share, total)
    long pooled_share = 0, pooled_total = 0;
    for (auto& [key, seqs] : groups) {
        // exact duplicate captions are excluded before pairing
        std::sort(seqs.begin(), seqs.end());
        seqs.erase(std::unique(seqs.begin(), seqs.end()), seqs.end());
        int n = static_cast<int>(seqs.size());
        long total = static_cast<long>(n) * (n - 1) / 2;
        long share = 0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j)
                if (proper_prefix(seqs[i], seqs[j]) ||
                    proper_prefix(seqs[j], seqs[i]))
                    ++share;
        auto& ps = per_scene[std::get<0>(key)];
        ps.first += share;
        ps.second += total;
        pooled_share += share;
        pooled_total += total;
    }

    if (aggregate == PrefixAggregate::pooled)
        return pooled_total > 0 ? static_cast<double>(pooled_share) / pooled_total
                                : 0.0;
    double sum = 0.0;
    int images = 0;
    for (const auto& [seed, st] : per_scene) {
        if (st.second == 0) continue;
        sum += static_cast<double>(st.first) / st.second;
        ++images;
    }
    return images > 0 ? sum / images : 0.0;
}

// ---------------------------------------------------------------------------
// Shard I/O
// ---------------------------------------------------------------------------

namespace {

std::string f6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string triplet_to_json(const Triplet& t) {
    std::string out = "{\"kind\":\"triplet\",\"scene\":" +
                      std::to_string(t.scene_seed) + ",\"box\":[" +
                      f6(t.box.cx) + "," + f6(t.box.cy) + "," + f6(t.box.w) +
                      "," + f6(t.box.h) + "],\"len\":" + std::to_string(t.len) +
                      ",\"tokens\":[";
    for (size_t i = 0; i < t.tokens.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(t.tokens[i]);
    }
    out += "]}";
    return out;
}

[[noreturn]] void bad_line(size_t line_no, const std::string& why) {
    throw std::runtime_error("shard: malformed record at line " +
                             std::to_string(line_no) + ": " + why);
}

}  // namespace

void write_shard(const Shard& shard, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    // canonical order: ascending scene seed, each scene then its triplets
    std::vector<const world::Scene*> scenes;
    for (const auto& s : shard.scenes) scenes.push_back(&s);
    std::stable_sort(scenes.begin(), scenes.end(),
                     [](auto* a, auto* b) { return a->seed < b->seed; });
    for (const auto* s : scenes) {
        f << world::scene_to_json(*s) << '\n';
        for (const auto& t : shard.triplets)
            if (t.scene_seed == s->seed) f << triplet_to_json(t) << '\n';
    }
    if (!f) throw std::runtime_error("write failed: " + path);
}

Shard read_shard(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open for read: " + path);
    const int vocab_size = Vocab::build().size();
    Shard shard;
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            bad_line(line_no, e.what());
        }
        std::string kind = j.value("kind", "");
        if (kind == "scene") {
            try {
                shard.scenes.push_back(world::scene_from_json(line));
            } catch (const std::exception& e) {
                bad_line(line_no, e.what());
            }
        } else if (kind == "triplet") {
            Triplet t;
            try {
                t.scene_seed = j.at("scene").get<uint64_t>();
                auto box = j.at("box");
                if (box.size() != 4) bad_line(line_no, "box must have 4 floats");
                t.box = {box[0].get<double>(), box[1].get<double>(),
                         box[2].get<double>(), box[3].get<double>()};
                t.len = j.at("len").get<int>();
                t.tokens = j.at("tokens").get<std::vector<int>>();
            } catch (const std::exception& e) {
                bad_line(line_no, e.what());
            }
            if (t.len < 1 || t.len > Vocab::kMaxLen)
                bad_line(line_no, "len out of range");
            if (static_cast<int>(t.tokens.size()) != kTextLen)
                bad_line(line_no, "tokens must have " +
                                      std::to_string(kTextLen) + " entries");
            for (int id : t.tokens)
                if (id < 0 || id >= vocab_size)
                    bad_line(line_no, "token id out of range");
            shard.triplets.push_back(std::move(t));
        } else {
            bad_line(line_no, "unknown record kind '" + kind + "'");
        }
    }
    std::set<uint64_t> seeds;
    for (const auto& s : shard.scenes) seeds.insert(s.seed);
    for (const auto& t : shard.triplets)
        if (!seeds.count(t.scene_seed))
            throw std::runtime_error(
                "shard: triplet references missing scene seed " +
                std::to_string(t.scene_seed));
    return shard;
}

std::vector<int> length_histogram(const Shard& shard) {
    std::vector<int> hist(Vocab::kMaxLen + 1, 0);
    for (const auto& t : shard.triplets) hist[t.len]++;
    return hist;
}

}  // namespace flexcap::data
