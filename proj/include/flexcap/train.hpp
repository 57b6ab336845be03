#pragma once

// Training loop: warmup+cosine learning-rate schedule, per-scene box
// subsampling, AdamW with global-norm gradient clipping, binary checkpoints,
// and a loss curve. Deterministic end-to-end for fixed seeds: one data rng
// stream, sequential accumulation everywhere.

#include <cstdint>
#include <string>
#include <vector>

#include "flexcap/dataset.hpp"
#include "flexcap/model.hpp"
#include "flexcap/rng.hpp"

namespace flexcap::train {

struct TrainConfig {
    int steps = 5000;
    int batch_size = 32;
    double peak_lr = 3e-4;
    int warmup = 200;
    double weight_decay = 0.05;
    int max_boxes = 8;  // per scene visit
    uint64_t init_seed = 1;
    uint64_t data_seed = 2;
    int checkpoint_every = 0;  // 0 = only the final checkpoint
    double grad_clip = 1.0;    // global norm; <= 0 disables

    void validate() const;
};

// Linear 0 -> peak over [0, warmup], then cosine peak -> 0 over
// [warmup, steps]. Continuous at warmup, non-negative everywhere.
double lr_at(int step, const TrainConfig& cfg);

// One sampled training slot: a scene position in the shard plus one of its
// triplets. Items from the same scene visit are consecutive, so the loss can
// share that scene's encoder pass.
struct BatchItem {
    int scene_index = 0;
    const data::Triplet* triplet = nullptr;
};

// Uniform over scenes that own at least one triplet; per visit at most
// max_boxes distinct boxes, one caption drawn uniformly per box.
std::vector<BatchItem> sample_batch(const data::Shard& shard, Rng& rng,
                                    int batch_size, int max_boxes = 8);

struct LossPoint {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
};

std::string curve_to_csv(const std::vector<LossPoint>& curve);
void write_loss_curve(const std::vector<LossPoint>& curve,
                      const std::string& path);

// AdamW first/second moments, one tensor per parameter tensor in traversal
// order, plus the shared step counter.
struct AdamState {
    std::vector<Tensor> m, v;
    long t = 0;
    void init(const model::ModelParams& p);
};

// One optimization step over an assembled batch: loss+grads, finite check,
// global-norm clip, AdamW update. Returns the (pre-update) batch loss.
// `step` is used only for the error message on a non-finite loss.
float train_step(model::ModelParams& p, const std::vector<model::Example>& batch,
                 AdamState& state, double lr, const TrainConfig& cfg,
                 model::ModelParams& grads, int step);

struct TrainResult {
    model::ModelParams params;
    std::vector<LossPoint> curve;
};

// Full loop. If checkpoint_dir is non-empty, writes ckpt_<step>.bin at the
// configured cadence plus final.bin at the end.
TrainResult train(const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                  const data::Shard& shard,
                  const std::string& checkpoint_dir = "");

// Binary checkpoint: magic "FXCP", version u16, the model config, then every
// tensor in traversal order as (name, rank, dims, little-endian f32 data).
void save_checkpoint(const model::ModelParams& p, const std::string& path);
model::ModelParams load_checkpoint(const std::string& path);
// Overload that also validates the stored config against an expected one.
model::ModelParams load_checkpoint(const std::string& path,
                                   const model::ModelConfig& expected);

}  // namespace flexcap::train
