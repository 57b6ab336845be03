#pragma once

#include <cstdint>
#include <vector>

#include "flexcap/model.hpp"
#include "flexcap/rng.hpp"
#include "flexcap/vocab.hpp"

namespace flexcap::decode {

enum class Mode { greedy, nucleus };
enum class TerminatedBy { eos, max_steps };

// Decoding run configuration as exposed by the CLI. `prefix` must begin
// with a LEN_k token and may continue with word tokens (prefix
// conditioning, e.g. [LEN_4, the, color, is]).
struct DecodeConfig {
    Mode mode = Mode::greedy;
    double p = 0.9;          // nucleus mass
    double temperature = 1.0;
    int samples = 1;         // nucleus rollouts
    int max_steps = 0;       // 0 = up to model capacity
    uint64_t seed = 0;
    std::vector<int> prefix;

    void validate(const model::ModelConfig& cfg) const;
};

struct TokenProb {
    int id;
    double prob;
};

// Nucleus distribution of one logits row: divide by temperature, softmax,
// sort by probability descending (ties -> lower id first), keep the
// smallest prefix whose cumulative mass reaches p (the top token is always
// kept), renormalize. p == 1.0 keeps every token with nonzero probability.
std::vector<TokenProb> next_token_dist(const float* logits, int n,
                                       double temperature, double p);
std::vector<TokenProb> next_token_dist(const std::vector<float>& logits,
                                       double temperature, double p);

struct DecodeResult {
    Box box{};
    std::vector<int> prefix;
    std::vector<int> words;  // generated word ids after the prefix, EOS excluded
    TerminatedBy terminated_by = TerminatedBy::max_steps;
    double logprob = 0.0;    // sum of selected-token log probabilities

    // tokens the decoder actually selected (words plus the EOS, when hit)
    int selected_count() const {
        return static_cast<int>(words.size()) +
               (terminated_by == TerminatedBy::eos ? 1 : 0);
    }
    // length-normalized logprob, the dense-captioning confidence
    double confidence() const {
        int n = selected_count();
        return logprob / (n > 0 ? n : 1);
    }
};

// Autoregressive decoder over a fixed (image, box) context with per-layer
// key/value caches. Logits returned by feed() are bit-identical to the
// matching row of model::decode_logits on the same params. rewind() drops
// the fed text rows but keeps the processed image+box prefix, so repeated
// rollouts over one region cost only their own text rows.
class IncrementalDecoder {
  public:
    IncrementalDecoder(const model::ModelParams& p, const Tensor& vision,
                       const Box& box);

    // appends one text token; returns the next-token logits row (vocab_size)
    const std::vector<float>& feed(int token);
    void rewind();
    int text_len() const { return text_len_; }

  private:
    const model::ModelParams* p_;
    int n_prefix_ = 0;   // vision patches + box token
    int rows_ = 0;       // prefix + fed text rows
    int text_len_ = 0;

    struct LayerCache {
        Tensor k, v;  // (prefix + max_text) x d, rows [0, rows_) valid
    };
    std::vector<LayerCache> cache_;

    // per-step scratch rows
    std::vector<float> xrow_, ln1_, qkv_, ctx_, proj_, xmid_, ln2_, fc1_,
        gelu_, lnf_, logits_, probs_;
};

// Greedy decoding: argmax each step (ties -> lower id), stop at EOS or when
// the text capacity after the prefix is exhausted. Structural tokens (PAD,
// BOS, LEN_*) never appear: their logits are masked to -inf.
DecodeResult greedy(const model::ModelParams& p, const world::Image& img,
                    const Box& box, const std::vector<int>& prefix,
                    int max_steps = 0);
DecodeResult greedy(const model::ModelParams& p, const Tensor& vision,
                    const Box& box, const std::vector<int>& prefix,
                    int max_steps = 0);
// rollout over an existing decoder (rewinds it first)
DecodeResult greedy(IncrementalDecoder& dec, const model::ModelConfig& cfg,
                    const Box& box, const std::vector<int>& prefix,
                    int max_steps = 0);

// k independent seeded nucleus rollouts; every sampled token lies inside
// that step's nucleus set; deterministic given seed.
std::vector<DecodeResult> nucleus_sample(const model::ModelParams& p,
                                         const world::Image& img,
                                         const Box& box,
                                         const std::vector<int>& prefix,
                                         double top_p, double temperature,
                                         int k, uint64_t seed,
                                         int max_steps = 0);
std::vector<DecodeResult> nucleus_sample(const model::ModelParams& p,
                                         const Tensor& vision,
                                         const Box& box,
                                         const std::vector<int>& prefix,
                                         double top_p, double temperature,
                                         int k, uint64_t seed,
                                         int max_steps = 0);
// single rollout over an existing decoder with a caller-owned rng
DecodeResult nucleus_one(IncrementalDecoder& dec,
                         const model::ModelConfig& cfg, const Box& box,
                         const std::vector<int>& prefix, double top_p,
                         double temperature, Rng& rng, int max_steps = 0);
// k rollouts over an existing decoder; same seeding scheme as the
// standalone overloads, so results agree for equal seeds
std::vector<DecodeResult> nucleus_sample(IncrementalDecoder& dec,
                                         const model::ModelConfig& cfg,
                                         const Box& box,
                                         const std::vector<int>& prefix,
                                         double top_p, double temperature,
                                         int k, uint64_t seed,
                                         int max_steps = 0);

// CLI dispatcher: greedy -> one result, nucleus -> cfg.samples results.
std::vector<DecodeResult> run_decode(const model::ModelParams& p,
                                     const world::Image& img,
                                     const Box& box,
                                     const DecodeConfig& cfg);

}  // namespace flexcap::decode
