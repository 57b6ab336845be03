#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "flexcap/decode.hpp"
#include "flexcap/vocab.hpp"
#include "flexcap/world.hpp"

namespace flexcap::eval {

// ---------------------------------------------------------------------------
// Metrics. Box IoU lives in geometry.hpp (flexcap::iou); token_f1 is the
// text-similarity surrogate used by the dense-captioning grid.
// ---------------------------------------------------------------------------

// Unigram precision/recall F1 between two word multisets. Both empty -> 1,
// exactly one empty -> 0. Symmetric, in [0, 1], 1 iff equal multisets.
double token_f1(const std::vector<std::string>& pred,
                const std::vector<std::string>& ref);

// ---------------------------------------------------------------------------
// Captioner seam: evaluation protocols run against this interface so they
// can be exercised with oracle stand-ins as well as trained models.
// ---------------------------------------------------------------------------

class SceneCaptioner {
  public:
    virtual ~SceneCaptioner() = default;
    virtual decode::DecodeResult greedy(const Box& box,
                                        const std::vector<int>& prefix,
                                        int max_steps = 0) = 0;
    virtual std::vector<decode::DecodeResult> sample(
        const Box& box, const std::vector<int>& prefix, int k,
        uint64_t seed) = 0;
};

using CaptionerFactory =
    std::function<std::unique_ptr<SceneCaptioner>(const world::Scene&)>;

// Captioner backed by trained params: renders and encodes the scene image
// once, reuses one incremental decoder per box. The params reference must
// outlive the factory and every captioner it produces.
CaptionerFactory model_captioner_factory(const model::ModelParams& params,
                                         double top_p = 0.9,
                                         double temperature = 1.0);

// ---------------------------------------------------------------------------
// Length compliance: one seeded random object per scene, greedy decode per
// LEN_k, report mean emitted word count and exact-length accuracy per k.
// Lengths the grammar cannot produce for an object (6..8 without a usable
// neighbor caption) still run but drop out of that row's denominators.
// ---------------------------------------------------------------------------

struct ComplianceRow {
    int target_len = 0;
    double mean_len = 0.0;
    double accuracy = 0.0;
    int count = 0;  // objects whose grammar offers this length
};

std::vector<ComplianceRow> eval_length_compliance(
    const CaptionerFactory& factory, const std::vector<world::Scene>& scenes,
    const std::vector<int>& lengths, int sample_size, uint64_t seed);

std::string compliance_to_csv(const std::vector<ComplianceRow>& rows);

// ---------------------------------------------------------------------------
// Region classification: per ground-truth object (true box), sample k
// captions at each length; a caption votes for the first shape word it
// contains, captions without one abstain; plurality wins, ties -> lower
// shape id (enum order).
// ---------------------------------------------------------------------------

struct RegionClassificationResult {
    double accuracy = 0.0;
    int correct = 0;
    int total = 0;
};

RegionClassificationResult eval_region_classification(
    const CaptionerFactory& factory, const Vocab& vocab,
    const std::vector<world::Scene>& scenes, int samples_per_length,
    const std::vector<int>& lengths, uint64_t seed);

// ---------------------------------------------------------------------------
// Dense captioning mAP over the IoU x similarity threshold grid.
// ---------------------------------------------------------------------------

struct DenseEvalConfig {
    std::vector<double> iou_thresholds{0.3, 0.4, 0.5, 0.6, 0.7};
    std::vector<double> sim_thresholds{0.0, 0.05, 0.1, 0.15, 0.2, 0.25};

    void validate() const;  // non-empty, strictly ascending
};

struct DensePrediction {
    int image_id = 0;
    Box box;
    std::vector<std::string> words;
    double confidence = 0.0;
};

struct DenseGroundTruth {
    int image_id = 0;
    Box box;
    std::vector<std::string> words;
};

struct DenseReport {
    double map = 0.0;
    std::vector<double> iou_thresholds, sim_thresholds;
    std::vector<std::vector<double>> cell_ap;  // [iou index][sim index]

    std::string grid_csv() const;
};

// For every (iou, sim) threshold cell: predictions in descending confidence
// each nominate their best-IoU unmatched same-image ground truth, claiming
// it iff it meets both thresholds; AP is the all-point area under the
// precision-recall curve; mAP averages the grid (raising a threshold can
// then never increase a cell's AP). Throws on empty GT.
DenseReport eval_dense_captioning(const std::vector<DensePrediction>& preds,
                                  const std::vector<DenseGroundTruth>& gts,
                                  const DenseEvalConfig& cfg);

// Self-contained dense run over scenes: ground truths are the canonical
// 3-word captions; proposals are per-object jittered true boxes (+-0.05
// uniform center/size noise) plus 2 seeded distractor boxes per scene,
// captioned by greedy LEN_pred_len decode with length-normalized logprob
// confidence.
DenseReport run_dense_eval(const CaptionerFactory& factory, const Vocab& vocab,
                           const std::vector<world::Scene>& scenes,
                           const DenseEvalConfig& cfg, uint64_t seed,
                           int pred_len = 3);

// ---------------------------------------------------------------------------
// Prefix extraction: greedy completion of [LEN_4, the, <attr>, is] against
// the object's true attribute word, per attribute, over all objects.
// ---------------------------------------------------------------------------

struct PrefixExtractionResult {
    double color_acc = 0.0;
    double size_acc = 0.0;
    double shape_acc = 0.0;
    int total = 0;
};

PrefixExtractionResult eval_prefix_extraction(
    const CaptionerFactory& factory, const Vocab& vocab,
    const std::vector<world::Scene>& scenes);

}  // namespace flexcap::eval
