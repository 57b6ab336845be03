#pragma once

// The captioner: a patch-embedding vision encoder, a linearly projected box
// token, and a causal text decoder over the concatenated [vision | box |
// text] sequence, trained with masked next-token cross-entropy.
//
// Layout of the decoder sequence (S = n + 1 + M rows):
//   rows 0..n-1   vision features (from the encoder)
//   row  n        box token
//   rows n+1..    text: position i holds tokens[i] (starting at LEN_K)
// Vision/box rows attend only among themselves; text row i attends the
// vision/box prefix plus text rows <= i. That structure makes text-side
// causality exact and lets decoding cache the prefix per (image, box).

#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "flexcap/geometry.hpp"
#include "flexcap/nn.hpp"
#include "flexcap/rng.hpp"
#include "flexcap/tensor.hpp"
#include "flexcap/vocab.hpp"
#include "flexcap/world.hpp"

namespace flexcap::model {

struct ModelConfig {
    int image_size = 64;
    int patch_size = 8;
    int d_model = 64;
    int enc_layers = 2;
    int dec_layers = 2;
    int heads = 4;
    int vocab_size = 41;  // Vocab::build().size()
    int max_text = 12;    // M
    int ff_mult = 4;
    // Whether position 0 (the length token) carries a loss predicting w1.
    bool loss_at_len_position = true;

    int grid() const { return image_size / patch_size; }
    int n_patches() const { return grid() * grid(); }
    int patch_dim() const { return patch_size * patch_size * 3; }
    int d_ff() const { return ff_mult * d_model; }
    int head_dim() const { return d_model / heads; }
    int seq_len() const { return n_patches() + 1 + max_text; }

    void validate() const {
        if (image_size <= 0 || patch_size <= 0 || d_model <= 0 ||
            enc_layers <= 0 || dec_layers <= 0 || heads <= 0 ||
            vocab_size <= Vocab::kFirstWord || max_text < 3 || ff_mult <= 0)
            throw std::invalid_argument("ModelConfig: all dims must be positive");
        if (image_size % patch_size != 0)
            throw std::invalid_argument("ModelConfig: patch must divide image");
        if (d_model % heads != 0)
            throw std::invalid_argument("ModelConfig: heads must divide d_model");
    }

    bool operator==(const ModelConfig& o) const {
        return image_size == o.image_size && patch_size == o.patch_size &&
               d_model == o.d_model && enc_layers == o.enc_layers &&
               dec_layers == o.dec_layers && heads == o.heads &&
               vocab_size == o.vocab_size && max_text == o.max_text &&
               ff_mult == o.ff_mult &&
               loss_at_len_position == o.loss_at_len_position;
    }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
struct LinearParamsT {
    TensorT<T> w;  // in x out
    TensorT<T> b;  // out
    void resize(int in, int out) {
        w.resize({in, out});
        b.resize({out});
    }
};

template <typename T>
struct LayerNormParamsT {
    TensorT<T> g, b;
    void resize(int n) {
        g.resize({n});
        b.resize({n});
    }
};

template <typename T>
struct BlockParamsT {
    LayerNormParamsT<T> ln1, ln2;
    // Fused qkv projection is bias-free: a key bias is invisible to the
    // softmax (per-row score shift), so its gradient is identically zero
    // and it would only add dead parameters.
    TensorT<T> qkv_w;       // d x 3d
    LinearParamsT<T> proj;  // d x d
    LinearParamsT<T> fc1;   // d x 4d
    LinearParamsT<T> fc2;   // 4d x d
    void resize(int d, int dff) {
        ln1.resize(d);
        ln2.resize(d);
        qkv_w.resize({d, 3 * d});
        proj.resize(d, d);
        fc1.resize(d, dff);
        fc2.resize(dff, d);
    }
};

template <typename T>
struct ModelParamsT {
    ModelConfig cfg;
    LinearParamsT<T> patch_embed;  // P x d
    TensorT<T> vis_pos;            // n x d
    LinearParamsT<T> box_proj;     // 4 x d
    TensorT<T> tok_embed;          // V x d
    TensorT<T> txt_pos;            // M x d
    std::vector<BlockParamsT<T>> enc, dec;
    LayerNormParamsT<T> enc_ln, dec_ln;
    LinearParamsT<T> out_proj;  // d x V

    void resize(const ModelConfig& c) {
        c.validate();
        cfg = c;
        patch_embed.resize(c.patch_dim(), c.d_model);
        vis_pos.resize({c.n_patches(), c.d_model});
        box_proj.resize(4, c.d_model);
        tok_embed.resize({c.vocab_size, c.d_model});
        txt_pos.resize({c.max_text, c.d_model});
        enc.assign(c.enc_layers, {});
        dec.assign(c.dec_layers, {});
        for (auto& b : enc) b.resize(c.d_model, c.d_ff());
        for (auto& b : dec) b.resize(c.d_model, c.d_ff());
        enc_ln.resize(c.d_model);
        dec_ln.resize(c.d_model);
        out_proj.resize(c.d_model, c.vocab_size);
    }

    // Visits every tensor in a fixed order; this order defines the init
    // stream, the checkpoint layout, and the optimizer state layout.
    template <typename F>
    void for_each(F&& fn) {
        fn("patch_embed.w", patch_embed.w);
        fn("patch_embed.b", patch_embed.b);
        fn("vis_pos", vis_pos);
        fn("box_proj.w", box_proj.w);
        fn("box_proj.b", box_proj.b);
        fn("tok_embed", tok_embed);
        fn("txt_pos", txt_pos);
        auto visit_blocks = [&](std::vector<BlockParamsT<T>>& blocks,
                                const char* prefix) {
            for (size_t i = 0; i < blocks.size(); ++i) {
                std::string p = std::string(prefix) + "." + std::to_string(i) + ".";
                fn(p + "ln1.g", blocks[i].ln1.g);
                fn(p + "ln1.b", blocks[i].ln1.b);
                fn(p + "qkv.w", blocks[i].qkv_w);
                fn(p + "proj.w", blocks[i].proj.w);
                fn(p + "proj.b", blocks[i].proj.b);
                fn(p + "ln2.g", blocks[i].ln2.g);
                fn(p + "ln2.b", blocks[i].ln2.b);
                fn(p + "fc1.w", blocks[i].fc1.w);
                fn(p + "fc1.b", blocks[i].fc1.b);
                fn(p + "fc2.w", blocks[i].fc2.w);
                fn(p + "fc2.b", blocks[i].fc2.b);
            }
        };
        visit_blocks(enc, "enc");
        fn("enc_ln.g", enc_ln.g);
        fn("enc_ln.b", enc_ln.b);
        visit_blocks(dec, "dec");
        fn("dec_ln.g", dec_ln.g);
        fn("dec_ln.b", dec_ln.b);
        fn("out.w", out_proj.w);
        fn("out.b", out_proj.b);
    }
    template <typename F>
    void for_each(F&& fn) const {
        const_cast<ModelParamsT<T>*>(this)->for_each(
            [&](const std::string& name, TensorT<T>& t) {
                fn(name, const_cast<const TensorT<T>&>(t));
            });
    }

    size_t param_count() const {
        size_t n = 0;
        for_each([&](const std::string&, const TensorT<T>& t) { n += t.numel(); });
        return n;
    }
    void zero_all() {
        for_each([](const std::string&, TensorT<T>& t) { t.zero(); });
    }
};

using ModelParams = ModelParamsT<float>;

// Truncated normal (std 0.02, cutoff 2 sigma) for weights and embeddings;
// zero biases; unit layer-norm gains. One sequential stream over for_each
// order, consumed only by normally-initialized tensors.
template <typename T>
ModelParamsT<T> init_params_t(const ModelConfig& cfg, uint64_t seed) {
    ModelParamsT<T> p;
    p.resize(cfg);
    Rng rng(mix_seed(seed, /*tag=*/0x1817));
    p.for_each([&](const std::string& name, TensorT<T>& t) {
        auto ends_with = [&](const char* suf) {
            size_t n = std::strlen(suf);
            return name.size() >= n && name.compare(name.size() - n, n, suf) == 0;
        };
        if (ends_with(".g")) {
            for (auto& v : t.data) v = T(1);
        } else if (ends_with(".b")) {
            t.zero();
        } else {
            nn::fill_truncated_normal(t.ptr(), t.numel(), rng, 0.02);
        }
    });
    return p;
}

inline ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
    return init_params_t<float>(cfg, seed);
}

template <typename T>
ModelParamsT<T> zeros_like(const ModelParamsT<T>& p) {
    ModelParamsT<T> z;
    z.resize(p.cfg);
    return z;  // resize value-initializes to zero
}

template <typename T>
std::vector<double> flatten_params(const ModelParamsT<T>& p) {
    std::vector<double> out;
    p.for_each([&](const std::string&, const TensorT<T>& t) {
        for (T v : t.data) out.push_back(static_cast<double>(v));
    });
    return out;
}

template <typename T>
void unflatten_params(const std::vector<double>& flat, ModelParamsT<T>& p) {
    size_t i = 0;
    p.for_each([&](const std::string&, TensorT<T>& t) {
        for (auto& v : t.data) v = static_cast<T>(flat[i++]);
    });
    if (i != flat.size())
        throw std::invalid_argument("unflatten_params: size mismatch");
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
struct BlockActsT {
    TensorT<T> x_in;      // S x d, block input
    TensorT<T> ln1_out;   // S x d
    TensorT<T> qkv;       // S x 3d
    TensorT<T> probs;     // heads x S x S (attention weights)
    TensorT<T> ctx;       // S x d, concatenated head outputs
    TensorT<T> x_mid;     // S x d, after attention residual
    TensorT<T> ln2_out;   // S x d
    TensorT<T> fc1_out;   // S x dff, pre-GELU
    TensorT<T> gelu_out;  // S x dff
};

template <typename T>
struct EncoderActsT {
    TensorT<T> patches;  // n x P
    TensorT<T> x0;       // n x d
    std::vector<BlockActsT<T>> blocks;
    TensorT<T> out;  // n x d, after final encoder norm
};

template <typename T>
struct DecoderActsT {
    int text_len = 0;        // text rows actually processed (<= M)
    std::vector<int> tokens;  // the padded input ids, size text_len
    TensorT<T> x0;           // (n+1+text_len) x d
    std::vector<BlockActsT<T>> blocks;
    TensorT<T> ln_out;  // text_len x d, final norm over text rows
    TensorT<T> logits;  // text_len x V
};

// ---------------------------------------------------------------------------
// Transformer block (shared by encoder and decoder)
// ---------------------------------------------------------------------------

template <typename T>
void block_forward(const ModelConfig& cfg, const BlockParamsT<T>& blk,
                   const TensorT<T>& x_in, const uint8_t* mask, int S,
                   BlockActsT<T>& acts, TensorT<T>& x_out) {
    int d = cfg.d_model, dff = cfg.d_ff(), H = cfg.heads, dh = cfg.head_dim();
    acts.x_in = x_in;
    acts.ln1_out.resize({S, d});
    for (int i = 0; i < S; ++i)
        nn::layer_norm_forward(x_in.row(i), blk.ln1.g.ptr(), blk.ln1.b.ptr(),
                               acts.ln1_out.row(i), d);
    acts.qkv.resize({S, 3 * d});
    nn::linear_forward(acts.ln1_out.ptr(), blk.qkv_w.ptr(),
                       static_cast<const T*>(nullptr), acts.qkv.ptr(), S, d,
                       3 * d);
    acts.probs.resize({H, S, S});
    acts.ctx.resize({S, d});
    for (int h = 0; h < H; ++h) {
        const T* q = acts.qkv.ptr() + h * dh;
        const T* k = acts.qkv.ptr() + d + h * dh;
        const T* v = acts.qkv.ptr() + 2 * d + h * dh;
        nn::attention_forward(q, 3 * d, k, 3 * d, v, 3 * d, mask, S, S, dh,
                              acts.probs.ptr() + static_cast<size_t>(h) * S * S,
                              acts.ctx.ptr() + h * dh, d);
    }
    acts.x_mid.resize({S, d});
    nn::linear_forward(acts.ctx.ptr(), blk.proj.w.ptr(), blk.proj.b.ptr(),
                       acts.x_mid.ptr(), S, d, d);
    for (size_t i = 0; i < acts.x_mid.numel(); ++i)
        acts.x_mid.data[i] += x_in.data[i];  // attention residual

    acts.ln2_out.resize({S, d});
    for (int i = 0; i < S; ++i)
        nn::layer_norm_forward(acts.x_mid.row(i), blk.ln2.g.ptr(),
                               blk.ln2.b.ptr(), acts.ln2_out.row(i), d);
    acts.fc1_out.resize({S, dff});
    nn::linear_forward(acts.ln2_out.ptr(), blk.fc1.w.ptr(), blk.fc1.b.ptr(),
                       acts.fc1_out.ptr(), S, d, dff);
    acts.gelu_out.resize({S, dff});
    for (size_t i = 0; i < acts.fc1_out.numel(); ++i)
        acts.gelu_out.data[i] = nn::gelu(acts.fc1_out.data[i]);
    x_out.resize({S, d});
    nn::linear_forward(acts.gelu_out.ptr(), blk.fc2.w.ptr(), blk.fc2.b.ptr(),
                       x_out.ptr(), S, dff, d);
    for (size_t i = 0; i < x_out.numel(); ++i)
        x_out.data[i] += acts.x_mid.data[i];  // feed-forward residual
}

// d_out is the gradient at the block output; returns gradient at the block
// input in d_in (overwritten). Parameter grads accumulate into gblk.
template <typename T>
void block_backward(const ModelConfig& cfg, const BlockParamsT<T>& blk,
                    const BlockActsT<T>& acts, const TensorT<T>& d_out,
                    BlockParamsT<T>& gblk, TensorT<T>& d_in) {
    int S = acts.x_in.shape[0];
    int d = cfg.d_model, dff = cfg.d_ff(), H = cfg.heads, dh = cfg.head_dim();

    // feed-forward path
    TensorT<T> d_gelu({S, dff});
    nn::linear_backward(acts.gelu_out.ptr(), blk.fc2.w.ptr(), d_out.ptr(),
                        d_gelu.ptr(), gblk.fc2.w.ptr(), gblk.fc2.b.ptr(), S,
                        dff, d);
    TensorT<T> d_fc1({S, dff});
    for (size_t i = 0; i < d_fc1.numel(); ++i)
        d_fc1.data[i] = d_gelu.data[i] * nn::gelu_grad(acts.fc1_out.data[i]);
    TensorT<T> d_ln2({S, d});
    nn::linear_backward(acts.ln2_out.ptr(), blk.fc1.w.ptr(), d_fc1.ptr(),
                        d_ln2.ptr(), gblk.fc1.w.ptr(), gblk.fc1.b.ptr(), S, d,
                        dff);
    // x_mid grad: residual + layer-norm path
    TensorT<T> d_xmid = d_out;
    for (int i = 0; i < S; ++i) {
        TensorT<T> row_dx({d});
        nn::layer_norm_backward(acts.x_mid.row(i), blk.ln2.g.ptr(),
                                d_ln2.row(i), row_dx.ptr(), gblk.ln2.g.ptr(),
                                gblk.ln2.b.ptr(), d);
        for (int t = 0; t < d; ++t) d_xmid.row(i)[t] += row_dx(t);
    }

    // attention path
    TensorT<T> d_ctx({S, d});
    nn::linear_backward(acts.ctx.ptr(), blk.proj.w.ptr(), d_xmid.ptr(),
                        d_ctx.ptr(), gblk.proj.w.ptr(), gblk.proj.b.ptr(), S,
                        d, d);
    TensorT<T> d_qkv({S, 3 * d});
    for (int h = 0; h < H; ++h) {
        const T* q = acts.qkv.ptr() + h * dh;
        const T* k = acts.qkv.ptr() + d + h * dh;
        const T* v = acts.qkv.ptr() + 2 * d + h * dh;
        nn::attention_backward(
            q, 3 * d, k, 3 * d, v, 3 * d,
            acts.probs.ptr() + static_cast<size_t>(h) * S * S, S, S, dh,
            d_ctx.ptr() + h * dh, d, d_qkv.ptr() + h * dh, 3 * d,
            d_qkv.ptr() + d + h * dh, 3 * d, d_qkv.ptr() + 2 * d + h * dh,
            3 * d);
    }
    TensorT<T> d_ln1({S, d});
    nn::linear_backward(acts.ln1_out.ptr(), blk.qkv_w.ptr(), d_qkv.ptr(),
                        d_ln1.ptr(), gblk.qkv_w.ptr(),
                        static_cast<T*>(nullptr), S, d,
                        3 * d);
    d_in = d_xmid;
    for (int i = 0; i < S; ++i) {
        TensorT<T> row_dx({d});
        nn::layer_norm_backward(acts.x_in.row(i), blk.ln1.g.ptr(),
                                d_ln1.row(i), row_dx.ptr(), gblk.ln1.g.ptr(),
                                gblk.ln1.b.ptr(), d);
        for (int t = 0; t < d; ++t) d_in.row(i)[t] += row_dx(t);
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

template <typename T>
void patchify(const ModelConfig& cfg, const world::Image& img, TensorT<T>& out) {
    if (img.size != cfg.image_size)
        throw std::invalid_argument("encode_image: image size mismatch");
    int g = cfg.grid(), ps = cfg.patch_size;
    out.resize({cfg.n_patches(), cfg.patch_dim()});
    for (int gy = 0; gy < g; ++gy) {
        for (int gx = 0; gx < g; ++gx) {
            T* row = out.row(gy * g + gx);
            int idx = 0;
            for (int py = 0; py < ps; ++py)
                for (int px = 0; px < ps; ++px)
                    for (int c = 0; c < 3; ++c)
                        row[idx++] = static_cast<T>(
                            img.at(gx * ps + px, gy * ps + py, c));
        }
    }
}

template <typename T>
void encode_image_fwd(const ModelParamsT<T>& p, const world::Image& img,
                      EncoderActsT<T>& acts) {
    const ModelConfig& cfg = p.cfg;
    int n = cfg.n_patches(), d = cfg.d_model;
    patchify(cfg, img, acts.patches);
    acts.x0.resize({n, d});
    nn::linear_forward(acts.patches.ptr(), p.patch_embed.w.ptr(),
                       p.patch_embed.b.ptr(), acts.x0.ptr(), n, cfg.patch_dim(),
                       d);
    for (size_t i = 0; i < acts.x0.numel(); ++i)
        acts.x0.data[i] += p.vis_pos.data[i];
    acts.blocks.resize(cfg.enc_layers);
    TensorT<T> x = acts.x0;
    TensorT<T> y;
    for (int l = 0; l < cfg.enc_layers; ++l) {
        block_forward(cfg, p.enc[l], x, /*mask=*/nullptr, n, acts.blocks[l], y);
        x = y;
    }
    acts.out.resize({n, d});
    for (int i = 0; i < n; ++i)
        nn::layer_norm_forward(x.row(i), p.enc_ln.g.ptr(), p.enc_ln.b.ptr(),
                               acts.out.row(i), d);
}

// Public op: n x d vision features for one image.
template <typename T>
TensorT<T> encode_image(const ModelParamsT<T>& p, const world::Image& img) {
    EncoderActsT<T> acts;
    encode_image_fwd(p, img, acts);
    return acts.out;
}

// d_vision is the gradient at the encoder output (n x d).
template <typename T>
void encode_image_bwd(const ModelParamsT<T>& p, const EncoderActsT<T>& acts,
                      const TensorT<T>& d_vision, ModelParamsT<T>& grads) {
    const ModelConfig& cfg = p.cfg;
    int n = cfg.n_patches(), d = cfg.d_model;
    TensorT<T> d_cur({n, d});
    {
        // reconstruct last block output rows from cached pieces
        TensorT<T> last_out({n, d});
        if (cfg.enc_layers == 0) {
            last_out = acts.x0;
        } else {
            const auto& nb = acts.blocks.back();
            nn::linear_forward(nb.gelu_out.ptr(), p.enc.back().fc2.w.ptr(),
                               p.enc.back().fc2.b.ptr(), last_out.ptr(), n,
                               cfg.d_ff(), d);
            for (size_t i = 0; i < last_out.numel(); ++i)
                last_out.data[i] += nb.x_mid.data[i];
        }
        for (int i = 0; i < n; ++i) {
            TensorT<T> row_dx({d});
            nn::layer_norm_backward(last_out.row(i), p.enc_ln.g.ptr(),
                                    d_vision.row(i), row_dx.ptr(),
                                    grads.enc_ln.g.ptr(), grads.enc_ln.b.ptr(),
                                    d);
            for (int t = 0; t < d; ++t) d_cur.row(i)[t] = row_dx(t);
        }
    }
    for (int l = cfg.enc_layers - 1; l >= 0; --l) {
        TensorT<T> d_prev;
        block_backward(cfg, p.enc[l], acts.blocks[l], d_cur, grads.enc[l],
                       d_prev);
        d_cur = d_prev;
    }
    // embedding: x0 = patches * W + b + vis_pos
    for (size_t i = 0; i < d_cur.numel(); ++i)
        grads.vis_pos.data[i] += d_cur.data[i];
    nn::linear_backward(acts.patches.ptr(), p.patch_embed.w.ptr(), d_cur.ptr(),
                        static_cast<T*>(nullptr), grads.patch_embed.w.ptr(),
                        grads.patch_embed.b.ptr(), n, cfg.patch_dim(), d);
}

// ---------------------------------------------------------------------------
// Box token
// ---------------------------------------------------------------------------

template <typename T>
std::vector<T> embed_box(const ModelParamsT<T>& p, const Box& box) {
    int d = p.cfg.d_model;
    T in[4] = {static_cast<T>(box.cx), static_cast<T>(box.cy),
               static_cast<T>(box.w), static_cast<T>(box.h)};
    std::vector<T> out(d);
    nn::linear_forward(in, p.box_proj.w.ptr(), p.box_proj.b.ptr(), out.data(),
                       1, 4, d);
    return out;
}

template <typename T>
void embed_box_bwd(const Box& box, const T* d_tok, ModelParamsT<T>& grads) {
    int d = grads.cfg.d_model;
    T in[4] = {static_cast<T>(box.cx), static_cast<T>(box.cy),
               static_cast<T>(box.w), static_cast<T>(box.h)};
    nn::linear_backward(in, static_cast<const T*>(nullptr), d_tok,
                        static_cast<T*>(nullptr), grads.box_proj.w.ptr(),
                        grads.box_proj.b.ptr(), 1, 4, d);
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

// Structural attention mask over S = n+1+text_len rows: vision/box rows see
// only vision/box; text row i sees vision/box plus text rows <= i.
inline std::vector<uint8_t> decoder_mask(int n_prefix, int text_len) {
    int S = n_prefix + text_len;
    std::vector<uint8_t> mask(static_cast<size_t>(S) * S, 0);
    for (int i = 0; i < S; ++i) {
        uint8_t* row = mask.data() + static_cast<size_t>(i) * S;
        for (int j = 0; j < n_prefix; ++j) row[j] = 1;
        if (i >= n_prefix)
            for (int j = n_prefix; j <= i; ++j) row[j] = 1;
    }
    return mask;
}

template <typename T>
void decode_fwd(const ModelParamsT<T>& p, const TensorT<T>& vision,
                const T* box_tok, const std::vector<int>& tokens,
                DecoderActsT<T>& acts, int text_len = -1) {
    const ModelConfig& cfg = p.cfg;
    int n = cfg.n_patches(), d = cfg.d_model;
    if (vision.shape[0] != n || vision.shape[1] != d)
        throw std::invalid_argument("decode: vision features have wrong shape");
    if (static_cast<int>(tokens.size()) > cfg.max_text)
        throw std::invalid_argument("decode: too many tokens");
    for (int id : tokens)
        if (id < 0 || id >= cfg.vocab_size)
            throw std::out_of_range("decode: token id outside vocab");

    int M = text_len > 0 ? text_len : cfg.max_text;
    acts.text_len = M;
    acts.tokens.assign(M, Vocab::kPad);
    for (size_t i = 0; i < tokens.size() && i < static_cast<size_t>(M); ++i)
        acts.tokens[i] = tokens[i];

    int prefix = n + 1, S = prefix + M;
    acts.x0.resize({S, d});
    for (int i = 0; i < n; ++i)
        std::memcpy(acts.x0.row(i), vision.row(i), sizeof(T) * d);
    std::memcpy(acts.x0.row(n), box_tok, sizeof(T) * d);
    for (int i = 0; i < M; ++i) {
        T* row = acts.x0.row(prefix + i);
        const T* e = p.tok_embed.row(acts.tokens[i]);
        const T* pos = p.txt_pos.row(i);
        for (int t = 0; t < d; ++t) row[t] = e[t] + pos[t];
    }

    std::vector<uint8_t> mask = decoder_mask(prefix, M);
    acts.blocks.resize(cfg.dec_layers);
    TensorT<T> x = acts.x0;
    TensorT<T> y;
    for (int l = 0; l < cfg.dec_layers; ++l) {
        block_forward(cfg, p.dec[l], x, mask.data(), S, acts.blocks[l], y);
        x = y;
    }
    // final norm + logits over text rows only
    acts.ln_out.resize({M, d});
    for (int i = 0; i < M; ++i)
        nn::layer_norm_forward(x.row(prefix + i), p.dec_ln.g.ptr(),
                               p.dec_ln.b.ptr(), acts.ln_out.row(i), d);
    acts.logits.resize({M, cfg.vocab_size});
    nn::linear_forward(acts.ln_out.ptr(), p.out_proj.w.ptr(),
                       p.out_proj.b.ptr(), acts.logits.ptr(), M, d,
                       cfg.vocab_size);
}

// Public op: M x V logits for a (vision, box, tokens) context.
template <typename T>
TensorT<T> decode_logits(const ModelParamsT<T>& p, const TensorT<T>& vision,
                         const std::vector<T>& box_tok,
                         const std::vector<int>& tokens) {
    DecoderActsT<T> acts;
    decode_fwd(p, vision, box_tok.data(), tokens, acts);
    return acts.logits;
}

// Backward through the decoder given d_logits. Accumulates parameter grads;
// adds the gradient at the vision rows into d_vision (n x d) and returns the
// box-token gradient via d_box (length d, overwritten).
template <typename T>
void decode_bwd(const ModelParamsT<T>& p, const DecoderActsT<T>& acts,
                const TensorT<T>& d_logits, ModelParamsT<T>& grads,
                TensorT<T>& d_vision, std::vector<T>& d_box) {
    const ModelConfig& cfg = p.cfg;
    int n = cfg.n_patches(), d = cfg.d_model;
    int M = acts.text_len, prefix = n + 1, S = prefix + M;

    TensorT<T> d_ln({M, d});
    nn::linear_backward(acts.ln_out.ptr(), p.out_proj.w.ptr(), d_logits.ptr(),
                        d_ln.ptr(), grads.out_proj.w.ptr(),
                        grads.out_proj.b.ptr(), M, d, cfg.vocab_size);

    // reconstruct the last block's output (the final-norm input)
    TensorT<T> last_out({S, d});
    {
        const auto& nb = acts.blocks.back();
        nn::linear_forward(nb.gelu_out.ptr(), p.dec.back().fc2.w.ptr(),
                           p.dec.back().fc2.b.ptr(), last_out.ptr(), S,
                           cfg.d_ff(), d);
        for (size_t i = 0; i < last_out.numel(); ++i)
            last_out.data[i] += nb.x_mid.data[i];
    }
    TensorT<T> d_cur({S, d});  // zero-initialized: non-text rows get no grad
    for (int i = 0; i < M; ++i) {
        TensorT<T> row_dx({d});
        nn::layer_norm_backward(last_out.row(prefix + i), p.dec_ln.g.ptr(),
                                d_ln.row(i), row_dx.ptr(), grads.dec_ln.g.ptr(),
                                grads.dec_ln.b.ptr(), d);
        for (int t = 0; t < d; ++t) d_cur.row(prefix + i)[t] = row_dx(t);
    }

    for (int l = cfg.dec_layers - 1; l >= 0; --l) {
        TensorT<T> d_prev;
        block_backward(cfg, p.dec[l], acts.blocks[l], d_cur, grads.dec[l],
                       d_prev);
        d_cur = d_prev;
    }

    // split x0 gradient back to its sources
    for (int i = 0; i < n; ++i)
        for (int t = 0; t < d; ++t) d_vision.row(i)[t] += d_cur.row(i)[t];
    d_box.assign(d, T(0));
    for (int t = 0; t < d; ++t) d_box[t] = d_cur.row(n)[t];
    for (int i = 0; i < M; ++i) {
        const T* row = d_cur.row(prefix + i);
        T* de = grads.tok_embed.row(acts.tokens[i]);
        T* dp = grads.txt_pos.row(i);
        for (int t = 0; t < d; ++t) {
            de[t] += row[t];
            dp[t] += row[t];
        }
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// One training example: an image (shared within a scene group), a region box
// and its padded token sequence [LEN_K, w1..wK, EOS, PAD...].
struct Example {
    const world::Image* image = nullptr;
    Box box;
    const std::vector<int>* tokens = nullptr;
};

// Targets are the inputs shifted left by one; the loss covers positions up
// to and including the EOS target (plus optionally the length position).
// Rows after EOS never influence the loss, so the decoder only runs
// eos_index+1 text rows (exact truncation, not an approximation).
inline int eos_index_of(const std::vector<int>& tokens, int M) {
    for (int i = 0; i < M && i < static_cast<int>(tokens.size()); ++i)
        if (tokens[i] == Vocab::kEos) return i;
    return M;  // malformed: treat as full length
}

template <typename T>
struct LossWork {  // scratch reused across examples
    EncoderActsT<T> enc;
    DecoderActsT<T> dec;
    TensorT<T> d_logits;
    TensorT<T> d_vision;
    std::vector<T> d_box;
};

// Forward-only mean loss over the batch (mean over examples of the
// per-example mean over unmasked positions).
template <typename T>
T flexcap_loss(const ModelParamsT<T>& p, const std::vector<Example>& batch) {
    if (batch.empty()) throw std::invalid_argument("flexcap_loss: empty batch");
    const ModelConfig& cfg = p.cfg;
    T total = T(0);
    LossWork<T> work;
    size_t i = 0;
    while (i < batch.size()) {
        encode_image_fwd(p, *batch[i].image, work.enc);
        size_t j = i;
        for (; j < batch.size() && batch[j].image == batch[i].image; ++j) {
            const auto& ex = batch[j];
            int eos = eos_index_of(*ex.tokens, cfg.max_text);
            int text_len = std::min(cfg.max_text, eos + 1);
            auto box_tok = embed_box(p, ex.box);
            decode_fwd(p, work.enc.out, box_tok.data(), *ex.tokens, work.dec,
                       text_len);
            // build targets/mask on the truncated window
            std::vector<int> targets(text_len, Vocab::kPad);
            std::vector<uint8_t> mask(text_len, 0);
            for (int t = 0; t < text_len; ++t) {
                int nxt = t + 1 < static_cast<int>(ex.tokens->size())
                              ? (*ex.tokens)[t + 1]
                              : Vocab::kPad;
                if (t < eos && nxt != Vocab::kPad) {
                    targets[t] = nxt;
                    mask[t] = 1;
                }
            }
            if (!cfg.loss_at_len_position) mask[0] = 0;
            total += nn::cross_entropy_masked(work.dec.logits.ptr(),
                                              targets.data(), mask.data(),
                                              text_len, cfg.vocab_size);
        }
        i = j;
    }
    return total / static_cast<T>(batch.size());
}

// Loss plus parameter gradients (grads zeroed first). Returns the same value
// as flexcap_loss.
template <typename T>
T flexcap_loss_and_grad(const ModelParamsT<T>& p,
                        const std::vector<Example>& batch,
                        ModelParamsT<T>& grads) {
    if (batch.empty())
        throw std::invalid_argument("flexcap_loss_and_grad: empty batch");
    const ModelConfig& cfg = p.cfg;
    grads.zero_all();
    T total = T(0);
    T inv_batch = T(1) / static_cast<T>(batch.size());
    LossWork<T> work;
    size_t i = 0;
    while (i < batch.size()) {
        encode_image_fwd(p, *batch[i].image, work.enc);
        work.d_vision.resize({cfg.n_patches(), cfg.d_model});
        size_t j = i;
        for (; j < batch.size() && batch[j].image == batch[i].image; ++j) {
            const auto& ex = batch[j];
            int eos = eos_index_of(*ex.tokens, cfg.max_text);
            int text_len = std::min(cfg.max_text, eos + 1);
            auto box_tok = embed_box(p, ex.box);
            decode_fwd(p, work.enc.out, box_tok.data(), *ex.tokens, work.dec,
                       text_len);
            std::vector<int> targets(text_len, Vocab::kPad);
            std::vector<uint8_t> mask(text_len, 0);
            int count = 0;
            for (int t = 0; t < text_len; ++t) {
                int nxt = t + 1 < static_cast<int>(ex.tokens->size())
                              ? (*ex.tokens)[t + 1]
                              : Vocab::kPad;
                if (t < eos && nxt != Vocab::kPad) {
                    targets[t] = nxt;
                    mask[t] = 1;
                }
            }
            if (!cfg.loss_at_len_position) mask[0] = 0;
            for (int t = 0; t < text_len; ++t) count += mask[t] ? 1 : 0;
            work.d_logits.resize({text_len, cfg.vocab_size});
            T scale = count > 0 ? inv_batch / static_cast<T>(count) : T(0);
            total += nn::cross_entropy_fused(work.dec.logits.ptr(),
                                             targets.data(), mask.data(),
                                             text_len, cfg.vocab_size,
                                             work.d_logits.ptr(), scale);
            decode_bwd(p, work.dec, work.d_logits, grads, work.d_vision,
                       work.d_box);
            embed_box_bwd(ex.box, work.d_box.data(), grads);
        }
        encode_image_bwd(p, work.enc, work.d_vision, grads);
        i = j;
    }
    return total * inv_batch;
}

}  // namespace flexcap::model
