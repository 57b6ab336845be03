#include "flexcap/decode.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace flexcap::decode {

namespace {

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

// PAD, BOS and the length tokens are never legal outputs; EOS and the
// lexicon words stay. Masking keeps an undertrained model from emitting
// structural tokens.
void mask_structural(std::vector<float>& logits) {
    logits[Vocab::kPad] = kNegInf;
    logits[Vocab::kBos] = kNegInf;
    for (int k = 1; k <= Vocab::kMaxLen; ++k)
        logits[Vocab::len_token(k)] = kNegInf;
}

int argmax_token(const std::vector<float>& logits) {
    int best = 0;
    float bv = logits[0];
    for (int i = 1; i < static_cast<int>(logits.size()); ++i)
        if (logits[i] > bv) {  // ties -> lower id
            bv = logits[i];
            best = i;
        }
    return best;
}

double log_softmax_at(const std::vector<float>& logits, int id) {
    double mx = -std::numeric_limits<double>::infinity();
    for (float v : logits)
        if (static_cast<double>(v) > mx) mx = v;
    double sum = 0.0;
    for (float v : logits) sum += std::exp(static_cast<double>(v) - mx);
    return static_cast<double>(logits[id]) - mx - std::log(sum);
}

void validate_prefix(const model::ModelConfig& cfg,
                     const std::vector<int>& prefix) {
    if (prefix.empty())
        throw std::invalid_argument("decode: prefix must not be empty");
    if (!Vocab::is_len_token(prefix[0]))
        throw std::invalid_argument(
            "decode: prefix must begin with a length token");
    if (static_cast<int>(prefix.size()) >= cfg.max_text)
        throw std::invalid_argument(
            "decode: prefix leaves no room to generate");
    for (int id : prefix)
        if (id < 0 || id >= cfg.vocab_size)
            throw std::out_of_range("decode: prefix token id outside vocab");
}

// One generation loop shared by greedy and nucleus: feed the prefix, then
// select tokens until EOS or the step cap. select(logits, lp) returns the
// chosen token and writes its log probability.
template <typename SelectFn>
DecodeResult decode_loop(IncrementalDecoder& dec,
                         const model::ModelConfig& cfg, const Box& box,
                         const std::vector<int>& prefix, int max_steps,
                         SelectFn select) {
    validate_prefix(cfg, prefix);
    dec.rewind();
    std::vector<float> logits;
    for (int id : prefix) logits = dec.feed(id);

    int cap = cfg.max_text - static_cast<int>(prefix.size());
    if (max_steps > 0 && max_steps < cap) cap = max_steps;

    DecodeResult r;
    r.box = box;
    r.prefix = prefix;
    r.terminated_by = TerminatedBy::max_steps;
    for (int s = 0; s < cap; ++s) {
        mask_structural(logits);
        double lp = 0.0;
        int tok = select(logits, lp);
        r.logprob += lp;
        if (tok == Vocab::kEos) {
            r.terminated_by = TerminatedBy::eos;
            break;
        }
        r.words.push_back(tok);
        if (s + 1 < cap) logits = dec.feed(tok);
    }
    return r;
}

int sample_from(const std::vector<TokenProb>& dist, double u, double& lp) {
    double cum = 0.0;
    for (const TokenProb& t : dist) {
        cum += t.prob;
        if (u < cum) {
            lp = std::log(t.prob);
            return t.id;
        }
    }
    // u landed past the (floating-point) total mass; take the tail entry
    lp = std::log(dist.back().prob);
    return dist.back().id;
}

}  // namespace

void DecodeConfig::validate(const model::ModelConfig& cfg) const {
    if (!(p > 0.0 && p <= 1.0))
        throw std::invalid_argument("decode: nucleus mass must be in (0, 1]");
    if (!(temperature > 0.0))
        throw std::invalid_argument("decode: temperature must be positive");
    if (samples < 1)
        throw std::invalid_argument("decode: samples must be >= 1");
    if (max_steps < 0)
        throw std::invalid_argument("decode: max_steps must be >= 0");
    validate_prefix(cfg, prefix);
}

std::vector<TokenProb> next_token_dist(const float* logits, int n,
                                       double temperature, double p) {
    if (n <= 0) throw std::invalid_argument("decode: empty logits row");
    if (!(temperature > 0.0))
        throw std::invalid_argument("decode: temperature must be positive");
    if (!(p > 0.0 && p <= 1.0))
        throw std::invalid_argument("decode: nucleus mass must be in (0, 1]");

    std::vector<double> prob(n);
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
        prob[i] = static_cast<double>(logits[i]) / temperature;
        if (prob[i] > mx) mx = prob[i];
    }
    if (!std::isfinite(mx))
        throw std::invalid_argument("decode: no admissible token in logits");
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        prob[i] = std::exp(prob[i] - mx);
        sum += prob[i];
    }
    for (int i = 0; i < n; ++i) prob[i] /= sum;

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return prob[a] > prob[b]; });

    std::vector<TokenProb> nucleus;
    double cum = 0.0;
    for (int idx = 0; idx < n; ++idx) {
        int id = order[idx];
        if (p == 1.0) {
            // full-mass request keeps the whole positive support
            if (prob[id] <= 0.0) break;
            nucleus.push_back({id, prob[id]});
            cum += prob[id];
            continue;
        }
        nucleus.push_back({id, prob[id]});
        cum += prob[id];
        if (cum >= p) break;
    }
    for (TokenProb& t : nucleus) t.prob /= cum;
    return nucleus;
}

std::vector<TokenProb> next_token_dist(const std::vector<float>& logits,
                                       double temperature, double p) {
    return next_token_dist(logits.data(), static_cast<int>(logits.size()),
                           temperature, p);
}

IncrementalDecoder::IncrementalDecoder(const model::ModelParams& p,
                                       const Tensor& vision, const Box& box)
    : p_(&p) {
    const model::ModelConfig& cfg = p.cfg;
    int n = cfg.n_patches(), d = cfg.d_model;
    if (vision.shape.size() != 2 || vision.shape[0] != n ||
        vision.shape[1] != d)
        throw std::invalid_argument("decode: vision features have wrong shape");

    n_prefix_ = n + 1;
    int cap = n_prefix_ + cfg.max_text;
    cache_.resize(cfg.dec_layers);
    for (LayerCache& c : cache_) {
        c.k.resize({cap, d});
        c.v.resize({cap, d});
    }

    std::vector<float> box_tok = model::embed_box(p, box);
    Tensor x({n_prefix_, d});
    for (int i = 0; i < n; ++i)
        std::memcpy(x.row(i), vision.row(i), sizeof(float) * d);
    std::memcpy(x.row(n), box_tok.data(), sizeof(float) * d);

    // Run the image+box rows through each block with the library forward
    // (a null mask: these rows attend only among themselves, exactly the
    // prefix-row slice of the decoder mask), harvesting per-layer k/v.
    model::BlockActsT<float> acts;
    Tensor y;
    for (int l = 0; l < cfg.dec_layers; ++l) {
        model::block_forward(cfg, p.dec[l], x, nullptr, n_prefix_, acts, y);
        for (int i = 0; i < n_prefix_; ++i) {
            std::memcpy(cache_[l].k.row(i), acts.qkv.row(i) + d,
                        sizeof(float) * d);
            std::memcpy(cache_[l].v.row(i), acts.qkv.row(i) + 2 * d,
                        sizeof(float) * d);
        }
        x = y;
    }
    rows_ = n_prefix_;
    text_len_ = 0;

    int dff = cfg.d_ff();
    xrow_.resize(d);
    ln1_.resize(d);
    qkv_.resize(3 * d);
    ctx_.resize(d);
    proj_.resize(d);
    xmid_.resize(d);
    ln2_.resize(d);
    fc1_.resize(dff);
    gelu_.resize(dff);
    lnf_.resize(d);
    logits_.resize(cfg.vocab_size);
    probs_.resize(cap);
}

void IncrementalDecoder::rewind() {
    rows_ = n_prefix_;
    text_len_ = 0;
}

const std::vector<float>& IncrementalDecoder::feed(int token) {
    const model::ModelConfig& cfg = p_->cfg;
    int d = cfg.d_model, dff = cfg.d_ff(), H = cfg.heads, dh = cfg.head_dim();
    if (token < 0 || token >= cfg.vocab_size)
        throw std::out_of_range("decode: token id outside vocab");
    if (text_len_ >= cfg.max_text)
        throw std::invalid_argument("decode: too many tokens");

    // token embedding + text position, as the full forward builds its rows
    const float* e = p_->tok_embed.row(token);
    const float* pos = p_->txt_pos.row(text_len_);
    for (int j = 0; j < d; ++j) xrow_[j] = e[j] + pos[j];

    int Sk = rows_ + 1;  // everything cached plus this row
    for (size_t l = 0; l < cache_.size(); ++l) {
        const model::BlockParamsT<float>& blk = p_->dec[l];
        LayerCache& c = cache_[l];
        nn::layer_norm_forward(xrow_.data(), blk.ln1.g.ptr(), blk.ln1.b.ptr(),
                               ln1_.data(), d);
        nn::linear_forward(ln1_.data(), blk.qkv_w.ptr(),
                           static_cast<const float*>(nullptr), qkv_.data(), 1,
                           d, 3 * d);
        std::memcpy(c.k.row(rows_), qkv_.data() + d, sizeof(float) * d);
        std::memcpy(c.v.row(rows_), qkv_.data() + 2 * d, sizeof(float) * d);
        for (int h = 0; h < H; ++h)
            nn::attention_forward(qkv_.data() + h * dh, 3 * d,
                                  c.k.ptr() + h * dh, d, c.v.ptr() + h * dh,
                                  d, nullptr, 1, Sk, dh, probs_.data(),
                                  ctx_.data() + h * dh, d);
        nn::linear_forward(ctx_.data(), blk.proj.w.ptr(), blk.proj.b.ptr(),
                           proj_.data(), 1, d, d);
        for (int j = 0; j < d; ++j) xmid_[j] = proj_[j] + xrow_[j];
        nn::layer_norm_forward(xmid_.data(), blk.ln2.g.ptr(), blk.ln2.b.ptr(),
                               ln2_.data(), d);
        nn::linear_forward(ln2_.data(), blk.fc1.w.ptr(), blk.fc1.b.ptr(),
                           fc1_.data(), 1, d, dff);
        for (int j = 0; j < dff; ++j) gelu_[j] = nn::gelu(fc1_[j]);
        nn::linear_forward(gelu_.data(), blk.fc2.w.ptr(), blk.fc2.b.ptr(),
                           xrow_.data(), 1, dff, d);
        for (int j = 0; j < d; ++j) xrow_[j] += xmid_[j];
    }
    nn::layer_norm_forward(xrow_.data(), p_->dec_ln.g.ptr(),
                           p_->dec_ln.b.ptr(), lnf_.data(), d);
    nn::linear_forward(lnf_.data(), p_->out_proj.w.ptr(), p_->out_proj.b.ptr(),
                       logits_.data(), 1, d, cfg.vocab_size);
    ++rows_;
    ++text_len_;
    return logits_;
}

DecodeResult greedy(IncrementalDecoder& dec, const model::ModelConfig& cfg,
                    const Box& box, const std::vector<int>& prefix,
                    int max_steps) {
    return decode_loop(dec, cfg, box, prefix, max_steps,
                       [](const std::vector<float>& logits, double& lp) {
                           int tok = argmax_token(logits);
                           lp = log_softmax_at(logits, tok);
                           return tok;
                       });
}

DecodeResult greedy(const model::ModelParams& p, const Tensor& vision,
                    const Box& box, const std::vector<int>& prefix,
                    int max_steps) {
    IncrementalDecoder dec(p, vision, box);
    return greedy(dec, p.cfg, box, prefix, max_steps);
}

DecodeResult greedy(const model::ModelParams& p, const world::Image& img,
                    const Box& box, const std::vector<int>& prefix,
                    int max_steps) {
    return greedy(p, model::encode_image(p, img), box, prefix, max_steps);
}

DecodeResult nucleus_one(IncrementalDecoder& dec,
                         const model::ModelConfig& cfg, const Box& box,
                         const std::vector<int>& prefix, double top_p,
                         double temperature, Rng& rng, int max_steps) {
    return decode_loop(
        dec, cfg, box, prefix, max_steps,
        [&](const std::vector<float>& logits, double& lp) {
            std::vector<TokenProb> dist =
                next_token_dist(logits, temperature, top_p);
            return sample_from(dist, rng.uniform(), lp);
        });
}

std::vector<DecodeResult> nucleus_sample(IncrementalDecoder& dec,
                                         const model::ModelConfig& cfg,
                                         const Box& box,
                                         const std::vector<int>& prefix,
                                         double top_p, double temperature,
                                         int k, uint64_t seed, int max_steps) {
    if (k < 1) throw std::invalid_argument("decode: samples must be >= 1");
    std::vector<DecodeResult> out;
    out.reserve(k);
    for (int j = 0; j < k; ++j) {
        Rng rng(mix_seed(mix_seed(seed, 0x5A3D17u),
                         static_cast<uint64_t>(j)));
        out.push_back(nucleus_one(dec, cfg, box, prefix, top_p, temperature,
                                  rng, max_steps));
    }
    return out;
}

std::vector<DecodeResult> nucleus_sample(const model::ModelParams& p,
                                         const Tensor& vision, const Box& box,
                                         const std::vector<int>& prefix,
                                         double top_p, double temperature,
                                         int k, uint64_t seed, int max_steps) {
    IncrementalDecoder dec(p, vision, box);
    return nucleus_sample(dec, p.cfg, box, prefix, top_p, temperature, k,
                          seed, max_steps);
}

std::vector<DecodeResult> nucleus_sample(const model::ModelParams& p,
                                         const world::Image& img,
                                         const Box& box,
                                         const std::vector<int>& prefix,
                                         double top_p, double temperature,
                                         int k, uint64_t seed, int max_steps) {
    return nucleus_sample(p, model::encode_image(p, img), box, prefix, top_p,
                          temperature, k, seed, max_steps);
}

std::vector<DecodeResult> run_decode(const model::ModelParams& p,
                                     const world::Image& img, const Box& box,
                                     const DecodeConfig& cfg) {
    cfg.validate(p.cfg);
    if (cfg.mode == Mode::greedy)
        return {greedy(p, img, box, cfg.prefix, cfg.max_steps)};
    return nucleus_sample(p, img, box, cfg.prefix, cfg.p, cfg.temperature,
                          cfg.samples, cfg.seed, cfg.max_steps);
}

}  // namespace flexcap::decode
