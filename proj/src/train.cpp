#include "flexcap/train.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

#include "flexcap/world.hpp"

namespace flexcap::train {

void TrainConfig::validate() const {
    if (steps <= 0 || batch_size <= 0 || warmup <= 0 || max_boxes <= 0)
        throw std::invalid_argument("TrainConfig: counts must be positive");
    if (peak_lr <= 0.0 || weight_decay < 0.0)
        throw std::invalid_argument("TrainConfig: bad lr or weight decay");
    if (warmup >= steps)
        throw std::invalid_argument("TrainConfig: warmup must be < steps");
}

double lr_at(int step, const TrainConfig& cfg) {
    if (step < 0 || step > cfg.steps)
        throw std::invalid_argument("lr_at: step outside [0, steps]");
    if (step <= cfg.warmup)
        return cfg.peak_lr * static_cast<double>(step) / cfg.warmup;
    double frac = static_cast<double>(step - cfg.warmup) /
                  static_cast<double>(cfg.steps - cfg.warmup);
    return cfg.peak_lr * 0.5 * (1.0 + std::cos(M_PI * frac));
}

// ---------------------------------------------------------------------------
// batch sampling
// ---------------------------------------------------------------------------

namespace {

struct BoxGroup {
    Box box;
    std::vector<const data::Triplet*> captions;
};

struct SceneEntry {
    int scene_index = 0;
    std::vector<BoxGroup> groups;  // first-appearance order
};

// Scenes that own at least one triplet, with their triplets grouped by box.
std::vector<SceneEntry> index_shard(const data::Shard& shard) {
    std::unordered_map<uint64_t, int> seed_to_index;
    for (size_t i = 0; i < shard.scenes.size(); ++i)
        seed_to_index[shard.scenes[i].seed] = static_cast<int>(i);
    std::unordered_map<int, int> scene_to_entry;
    std::vector<SceneEntry> entries;
    for (const auto& t : shard.triplets) {
        auto it = seed_to_index.find(t.scene_seed);
        if (it == seed_to_index.end())
            throw std::invalid_argument("shard triplet references unknown scene");
        int scene = it->second;
        auto [eit, fresh] = scene_to_entry.try_emplace(
            scene, static_cast<int>(entries.size()));
        if (fresh) {
            entries.push_back({});
            entries.back().scene_index = scene;
        }
        auto& groups = entries[eit->second].groups;
        BoxGroup* g = nullptr;
        for (auto& cand : groups)
            if (cand.box == t.box) {
                g = &cand;
                break;
            }
        if (!g) {
            groups.push_back({t.box, {}});
            g = &groups.back();
        }
        g->captions.push_back(&t);
    }
    return entries;
}

void append_scene_visit(const SceneEntry& entry, Rng& rng, int max_boxes,
                        int batch_size, std::vector<BatchItem>& out) {
    int n = static_cast<int>(entry.groups.size());
    int take = std::min(n, max_boxes);
    // partial Fisher-Yates over group indices; when everything fits, keep
    // the stored order and spend no rng draws on shuffling
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    if (n > max_boxes) {
        for (int i = 0; i < take; ++i) {
            int j = i + static_cast<int>(rng.uniform_int(n - i));
            std::swap(order[i], order[j]);
        }
    }
    for (int i = 0; i < take && static_cast<int>(out.size()) < batch_size; ++i) {
        const BoxGroup& g = entry.groups[order[i]];
        const data::Triplet* pick =
            g.captions[rng.uniform_int(g.captions.size())];
        out.push_back({entry.scene_index, pick});
    }
}

std::vector<BatchItem> sample_from_index(const std::vector<SceneEntry>& index,
                                         Rng& rng, int batch_size,
                                         int max_boxes) {
    if (index.empty())
        throw std::invalid_argument("sample_batch: shard has no triplets");
    std::vector<BatchItem> out;
    out.reserve(batch_size);
    while (static_cast<int>(out.size()) < batch_size) {
        const SceneEntry& entry = index[rng.uniform_int(index.size())];
        append_scene_visit(entry, rng, max_boxes, batch_size, out);
    }
    return out;
}

}  // namespace

std::vector<BatchItem> sample_batch(const data::Shard& shard, Rng& rng,
                                    int batch_size, int max_boxes) {
    return sample_from_index(index_shard(shard), rng, batch_size, max_boxes);
}

// ---------------------------------------------------------------------------
// loss curve
// ---------------------------------------------------------------------------

std::string curve_to_csv(const std::vector<LossPoint>& curve) {
    std::string out = "step,loss,lr\n";
    char buf[96];
    for (const auto& p : curve) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g\n", p.step, p.loss, p.lr);
        out += buf;
    }
    return out;
}

void write_loss_curve(const std::vector<LossPoint>& curve,
                      const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write loss curve: " + path);
    f << curve_to_csv(curve);
}

// ---------------------------------------------------------------------------
// optimizer step
// ---------------------------------------------------------------------------

void AdamState::init(const model::ModelParams& p) {
    m.clear();
    v.clear();
    t = 0;
    p.for_each([&](const std::string&, const Tensor& w) {
        Tensor zm, zv;
        zm.resize(w.shape);
        zv.resize(w.shape);
        m.push_back(std::move(zm));
        v.push_back(std::move(zv));
    });
}

float train_step(model::ModelParams& p, const std::vector<model::Example>& batch,
                 AdamState& state, double lr, const TrainConfig& cfg,
                 model::ModelParams& grads, int step) {
    float loss = model::flexcap_loss_and_grad(p, batch, grads);
    if (!std::isfinite(loss))
        throw std::runtime_error("non-finite loss at step " +
                                 std::to_string(step));

    if (cfg.grad_clip > 0.0) {
        double sq = 0.0;
        grads.for_each([&](const std::string&, Tensor& g) {
            for (float x : g.data) sq += static_cast<double>(x) * x;
        });
        double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip) {
            float scale = static_cast<float>(cfg.grad_clip / norm);
            grads.for_each([&](const std::string&, Tensor& g) {
                for (float& x : g.data) x *= scale;
            });
        }
    }

    nn::AdamWConfig acfg;
    acfg.weight_decay = cfg.weight_decay;
    ++state.t;
    std::vector<Tensor*> gts;  // grads traverses in the same order as params
    grads.for_each([&](const std::string&, Tensor& g) { gts.push_back(&g); });
    size_t idx = 0;
    p.for_each([&](const std::string&, Tensor& w) {
        nn::adamw_update(w.ptr(), gts[idx]->ptr(), state.m[idx].ptr(),
                         state.v[idx].ptr(), w.numel(), state.t, lr, acfg);
        ++idx;
    });
    return loss;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

TrainResult train(const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                  const data::Shard& shard,
                  const std::string& checkpoint_dir) {
    mcfg.validate();
    tcfg.validate();
    if (mcfg.max_text != data::kTextLen)
        throw std::invalid_argument(
            "train: model max_text must match the dataset token length");

    auto index = index_shard(shard);
    if (index.empty())
        throw std::invalid_argument("train: shard has no triplets");

    TrainResult res;
    res.params = model::init_params(mcfg, tcfg.init_seed);
    model::ModelParams grads = model::zeros_like(res.params);
    AdamState state;
    state.init(res.params);
    Rng data_rng(mix_seed(tcfg.data_seed, /*tag=*/0xDA7A));

    std::unordered_map<int, world::Image> image_cache;
    res.curve.reserve(tcfg.steps);
    for (int step = 0; step < tcfg.steps; ++step) {
        auto items = sample_from_index(index, data_rng, tcfg.batch_size,
                                       tcfg.max_boxes);
        std::vector<model::Example> batch;
        batch.reserve(items.size());
        for (const auto& it : items) {
            auto [img_it, fresh] = image_cache.try_emplace(it.scene_index);
            if (fresh)
                img_it->second = world::render(shard.scenes[it.scene_index]);
            batch.push_back(
                {&img_it->second, it.triplet->box, &it.triplet->tokens});
        }
        double lr = lr_at(step, tcfg);
        float loss = train_step(res.params, batch, state, lr, tcfg, grads, step);
        res.curve.push_back({step, static_cast<double>(loss), lr});
        if (!checkpoint_dir.empty() && tcfg.checkpoint_every > 0 &&
            (step + 1) % tcfg.checkpoint_every == 0) {
            save_checkpoint(res.params, checkpoint_dir + "/ckpt_" +
                                            std::to_string(step + 1) + ".bin");
        }
    }
    if (!checkpoint_dir.empty())
        save_checkpoint(res.params, checkpoint_dir + "/final.bin");
    return res;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'F', 'X', 'C', 'P'};
constexpr uint16_t kVersion = 1;

void wr(std::ofstream& f, const void* p, size_t n) {
    f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
template <typename T>
void wr_val(std::ofstream& f, T v) {
    wr(f, &v, sizeof(v));
}

void rd(std::ifstream& f, void* p, size_t n) {
    f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!f) throw std::runtime_error("checkpoint truncated");
}
template <typename T>
T rd_val(std::ifstream& f) {
    T v;
    rd(f, &v, sizeof(v));
    return v;
}

void write_config(std::ofstream& f, const model::ModelConfig& c) {
    wr_val<int32_t>(f, c.image_size);
    wr_val<int32_t>(f, c.patch_size);
    wr_val<int32_t>(f, c.d_model);
    wr_val<int32_t>(f, c.enc_layers);
    wr_val<int32_t>(f, c.dec_layers);
    wr_val<int32_t>(f, c.heads);
    wr_val<int32_t>(f, c.vocab_size);
    wr_val<int32_t>(f, c.max_text);
    wr_val<int32_t>(f, c.ff_mult);
    wr_val<uint8_t>(f, c.loss_at_len_position ? 1 : 0);
}

model::ModelConfig read_config(std::ifstream& f) {
    model::ModelConfig c;
    c.image_size = rd_val<int32_t>(f);
    c.patch_size = rd_val<int32_t>(f);
    c.d_model = rd_val<int32_t>(f);
    c.enc_layers = rd_val<int32_t>(f);
    c.dec_layers = rd_val<int32_t>(f);
    c.heads = rd_val<int32_t>(f);
    c.vocab_size = rd_val<int32_t>(f);
    c.max_text = rd_val<int32_t>(f);
    c.ff_mult = rd_val<int32_t>(f);
    c.loss_at_len_position = rd_val<uint8_t>(f) != 0;
    return c;
}

}  // namespace

void save_checkpoint(const model::ModelParams& p, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
    wr(f, kMagic, 4);
    wr_val<uint16_t>(f, kVersion);
    write_config(f, p.cfg);
    uint32_t count = 0;
    p.for_each([&](const std::string&, const Tensor&) { ++count; });
    wr_val<uint32_t>(f, count);
    p.for_each([&](const std::string& name, const Tensor& t) {
        wr_val<uint32_t>(f, static_cast<uint32_t>(name.size()));
        wr(f, name.data(), name.size());
        wr_val<uint32_t>(f, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) wr_val<int32_t>(f, d);
        wr(f, t.ptr(), t.numel() * sizeof(float));
    });
    if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

model::ModelParams load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    rd(f, magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("not a checkpoint (bad magic): " + path);
    uint16_t version = rd_val<uint16_t>(f);
    if (version != kVersion)
        throw std::runtime_error("unsupported checkpoint version " +
                                 std::to_string(version));
    model::ModelConfig cfg = read_config(f);
    cfg.validate();
    model::ModelParams p;
    p.resize(cfg);
    uint32_t count = rd_val<uint32_t>(f);
    uint32_t expect = 0;
    p.for_each([&](const std::string&, Tensor&) { ++expect; });
    if (count != expect)
        throw std::runtime_error("checkpoint tensor count mismatch");
    p.for_each([&](const std::string& name, Tensor& t) {
        uint32_t len = rd_val<uint32_t>(f);
        std::string got(len, '\0');
        rd(f, got.data(), len);
        if (got != name)
            throw std::runtime_error("checkpoint tensor order mismatch: " +
                                     got + " vs " + name);
        uint32_t rank = rd_val<uint32_t>(f);
        if (rank != t.shape.size())
            throw std::runtime_error("checkpoint shape mismatch for " + name);
        for (int d : t.shape) {
            int32_t got_d = rd_val<int32_t>(f);
            if (got_d != d)
                throw std::runtime_error("checkpoint shape mismatch for " +
                                         name);
        }
        rd(f, t.ptr(), t.numel() * sizeof(float));
    });
    return p;
}

model::ModelParams load_checkpoint(const std::string& path,
                                   const model::ModelConfig& expected) {
    model::ModelParams p = load_checkpoint(path);
    if (!(p.cfg == expected))
        throw std::runtime_error(
            "checkpoint model config does not match the expected config");
    return p;
}

}  // namespace flexcap::train
