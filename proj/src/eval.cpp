#include "flexcap/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <unordered_map>

namespace flexcap::eval {

double token_f1(const std::vector<std::string>& pred,
                const std::vector<std::string>& ref) {
    if (pred.empty() && ref.empty()) return 1.0;
    if (pred.empty() || ref.empty()) return 0.0;
    std::map<std::string, int> want;
    for (const std::string& w : ref) ++want[w];
    int overlap = 0;
    for (const std::string& w : pred) {
        auto it = want.find(w);
        if (it != want.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    double p = static_cast<double>(overlap) / pred.size();
    double r = static_cast<double>(overlap) / ref.size();
    return 2.0 * p * r / (p + r);
}

// ---------------------------------------------------------------------------
// Model-backed captioner
// ---------------------------------------------------------------------------

namespace {

class ModelSceneCaptioner : public SceneCaptioner {
  public:
    ModelSceneCaptioner(const model::ModelParams& p, const world::Scene& scene,
                        double top_p, double temperature)
        : p_(&p),
          top_p_(top_p),
          temperature_(temperature),
          vision_(model::encode_image(p, world::render(scene))) {}

    decode::DecodeResult greedy(const Box& box, const std::vector<int>& prefix,
                                int max_steps) override {
        return decode::greedy(decoder_for(box), p_->cfg, box, prefix,
                              max_steps);
    }

    std::vector<decode::DecodeResult> sample(const Box& box,
                                             const std::vector<int>& prefix,
                                             int k, uint64_t seed) override {
        return decode::nucleus_sample(decoder_for(box), p_->cfg, box, prefix,
                                      top_p_, temperature_, k, seed, 0);
    }

  private:
    decode::IncrementalDecoder& decoder_for(const Box& box) {
        if (!dec_ || !(dec_box_ == box)) {
            dec_.emplace(*p_, vision_, box);
            dec_box_ = box;
        }
        return *dec_;
    }

    const model::ModelParams* p_;
    double top_p_, temperature_;
    Tensor vision_;
    std::optional<decode::IncrementalDecoder> dec_;
    Box dec_box_;
};

}  // namespace

CaptionerFactory model_captioner_factory(const model::ModelParams& params,
                                         double top_p, double temperature) {
    return [&params, top_p, temperature](const world::Scene& scene) {
        return std::make_unique<ModelSceneCaptioner>(params, scene, top_p,
                                                     temperature);
    };
}

// ---------------------------------------------------------------------------
// Length compliance
// ---------------------------------------------------------------------------

std::vector<ComplianceRow> eval_length_compliance(
    const CaptionerFactory& factory, const std::vector<world::Scene>& scenes,
    const std::vector<int>& lengths, int sample_size, uint64_t seed) {
    if (scenes.empty())
        throw std::invalid_argument("eval: empty test set");
    for (int k : lengths)
        if (k < 1 || k > Vocab::kMaxLen)
            throw std::invalid_argument("eval: length outside 1..8");

    size_t n = scenes.size();
    if (sample_size > 0 && static_cast<size_t>(sample_size) < n)
        n = static_cast<size_t>(sample_size);

    struct Acc {
        long sum_len = 0;
        int correct = 0;
        int count = 0;
    };
    std::vector<Acc> acc(lengths.size());

    for (size_t i = 0; i < n; ++i) {
        const world::Scene& scene = scenes[i];
        if (scene.objects.empty()) continue;
        Rng pick(mix_seed(mix_seed(seed, 0xC0817u), scene.seed));
        int oi = static_cast<int>(pick.uniform_int(scene.objects.size()));
        std::unique_ptr<SceneCaptioner> cap = factory(scene);
        Box box = scene.objects[oi].box();
        for (size_t li = 0; li < lengths.size(); ++li) {
            int k = lengths[li];
            decode::DecodeResult r =
                cap->greedy(box, {Vocab::len_token(k)}, 0);
            // prediction always runs; the row only counts objects whose
            // grammar actually offers this length
            if (!world::caption_for(scene, oi, k).has_value()) continue;
            acc[li].sum_len += static_cast<long>(r.words.size());
            acc[li].correct += static_cast<int>(r.words.size()) == k ? 1 : 0;
            acc[li].count += 1;
        }
    }

    std::vector<ComplianceRow> rows(lengths.size());
    for (size_t li = 0; li < lengths.size(); ++li) {
        rows[li].target_len = lengths[li];
        rows[li].count = acc[li].count;
        if (acc[li].count > 0) {
            rows[li].mean_len =
                static_cast<double>(acc[li].sum_len) / acc[li].count;
            rows[li].accuracy =
                static_cast<double>(acc[li].correct) / acc[li].count;
        }
    }
    return rows;
}

std::string compliance_to_csv(const std::vector<ComplianceRow>& rows) {
    std::string out = "target_len,mean_len,accuracy,count\n";
    char buf[128];
    for (const ComplianceRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%d\n", r.target_len,
                      r.mean_len, r.accuracy, r.count);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Region classification
// ---------------------------------------------------------------------------

RegionClassificationResult eval_region_classification(
    const CaptionerFactory& factory, const Vocab& vocab,
    const std::vector<world::Scene>& scenes, int samples_per_length,
    const std::vector<int>& lengths, uint64_t seed) {
    if (samples_per_length < 1)
        throw std::invalid_argument("eval: samples_per_length must be >= 1");
    // vocab id -> shape class id (enum order)
    std::unordered_map<int, int> shape_of;
    for (int s = 0; s < world::kNumShapes; ++s)
        shape_of[vocab.word_id(world::kShapeWords[s])] = s;

    RegionClassificationResult res;
    for (const world::Scene& scene : scenes) {
        std::unique_ptr<SceneCaptioner> cap = factory(scene);
        for (size_t oi = 0; oi < scene.objects.size(); ++oi) {
            const world::ObjectSpec& obj = scene.objects[oi];
            std::vector<int> votes(world::kNumShapes, 0);
            for (int k : lengths) {
                uint64_t s = mix_seed(
                    mix_seed(mix_seed(seed, 0x9EC1A5u), scene.seed),
                    static_cast<uint64_t>(oi) * 131u +
                        static_cast<uint64_t>(k));
                auto rollouts = cap->sample(
                    obj.box(), {Vocab::len_token(k)}, samples_per_length, s);
                for (const decode::DecodeResult& r : rollouts)
                    for (int id : r.words) {  // first shape word votes
                        auto it = shape_of.find(id);
                        if (it != shape_of.end()) {
                            ++votes[it->second];
                            break;
                        }
                    }
            }
            int best = 0;  // all-abstain degenerates to the lowest class id
            for (int c = 1; c < world::kNumShapes; ++c)
                if (votes[c] > votes[best]) best = c;
            res.total += 1;
            if (best == static_cast<int>(obj.shape)) res.correct += 1;
        }
    }
    if (res.total > 0)
        res.accuracy = static_cast<double>(res.correct) / res.total;
    return res;
}

// ---------------------------------------------------------------------------
// Dense captioning
// ---------------------------------------------------------------------------

void DenseEvalConfig::validate() const {
    auto ascending = [](const std::vector<double>& v) {
        if (v.empty()) return false;
        for (size_t i = 1; i < v.size(); ++i)
            if (!(v[i] > v[i - 1])) return false;
        return true;
    };
    if (!ascending(iou_thresholds) || !ascending(sim_thresholds))
        throw std::invalid_argument(
            "eval: thresholds must be non-empty and strictly ascending");
}

namespace {

// all-point interpolated area under the precision-recall curve
double average_precision(const std::vector<uint8_t>& tp_ranked, int n_gt) {
    int n = static_cast<int>(tp_ranked.size());
    if (n == 0 || n_gt == 0) return 0.0;
    std::vector<double> prec(n), rec(n);
    int tp = 0;
    for (int i = 0; i < n; ++i) {
        tp += tp_ranked[i];
        prec[i] = static_cast<double>(tp) / (i + 1);
        rec[i] = static_cast<double>(tp) / n_gt;
    }
    for (int i = n - 2; i >= 0; --i)
        prec[i] = std::max(prec[i], prec[i + 1]);
    double ap = rec[0] * prec[0];
    for (int i = 1; i < n; ++i) ap += (rec[i] - rec[i - 1]) * prec[i];
    return ap;
}

}  // namespace

DenseReport eval_dense_captioning(const std::vector<DensePrediction>& preds,
                                  const std::vector<DenseGroundTruth>& gts,
                                  const DenseEvalConfig& cfg) {
    cfg.validate();
    if (gts.empty())
        throw std::invalid_argument(
            "eval: dense captioning needs ground truths");

    // rank predictions by confidence (ties keep input order)
    std::vector<int> order(preds.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return preds[a].confidence > preds[b].confidence;
    });

    std::unordered_map<int, std::vector<int>> gts_of_image;
    for (size_t g = 0; g < gts.size(); ++g)
        gts_of_image[gts[g].image_id].push_back(static_cast<int>(g));

    // pairwise scores, computed once per (prediction, same-image gt)
    struct PairScore {
        int gt;
        double iou, f1;
    };
    std::vector<std::vector<PairScore>> pairs(preds.size());
    for (size_t pi = 0; pi < preds.size(); ++pi) {
        auto it = gts_of_image.find(preds[pi].image_id);
        if (it == gts_of_image.end()) continue;
        for (int g : it->second)
            pairs[pi].push_back({g, iou(preds[pi].box, gts[g].box),
                                 token_f1(preds[pi].words, gts[g].words)});
    }

    DenseReport rep;
    rep.iou_thresholds = cfg.iou_thresholds;
    rep.sim_thresholds = cfg.sim_thresholds;
    rep.cell_ap.assign(cfg.iou_thresholds.size(),
                       std::vector<double>(cfg.sim_thresholds.size(), 0.0));

    std::vector<uint8_t> gt_taken(gts.size());
    std::vector<uint8_t> tp_ranked(preds.size());
    int n_gt = static_cast<int>(gts.size());

    for (size_t ti = 0; ti < cfg.iou_thresholds.size(); ++ti) {
        for (size_t tj = 0; tj < cfg.sim_thresholds.size(); ++tj) {
            double th_iou = cfg.iou_thresholds[ti];
            double th_sim = cfg.sim_thresholds[tj];
            std::fill(gt_taken.begin(), gt_taken.end(), uint8_t(0));
            for (size_t r = 0; r < order.size(); ++r) {
                int pi = order[r];
                // Candidate first (max IoU over unmatched, ties -> lower gt
                // index), then threshold-test it. Testing before choosing
                // would let a raised similarity threshold redirect a
                // prediction to a different ground truth and free its old
                // one for a later prediction, which can raise the cell's AP
                // and break the monotonicity invariant.
                const PairScore* cand = nullptr;
                for (const PairScore& ps : pairs[pi]) {
                    if (gt_taken[ps.gt]) continue;
                    if (!cand || ps.iou > cand->iou) cand = &ps;
                }
                if (cand && cand->iou >= th_iou && cand->f1 >= th_sim) {
                    gt_taken[cand->gt] = 1;
                    tp_ranked[r] = 1;
                } else {
                    tp_ranked[r] = 0;
                }
            }
            rep.cell_ap[ti][tj] = average_precision(tp_ranked, n_gt);
        }
    }

    double total = 0.0;
    for (const auto& row : rep.cell_ap)
        for (double ap : row) total += ap;
    rep.map = total / (cfg.iou_thresholds.size() * cfg.sim_thresholds.size());
    return rep;
}

std::string DenseReport::grid_csv() const {
    char buf[64];
    std::string out = "iou_threshold";
    for (double s : sim_thresholds) {
        std::snprintf(buf, sizeof buf, ",sim_%.9g", s);
        out += buf;
    }
    out += "\n";
    for (size_t i = 0; i < iou_thresholds.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.9g", iou_thresholds[i]);
        out += buf;
        for (size_t j = 0; j < sim_thresholds.size(); ++j) {
            std::snprintf(buf, sizeof buf, ",%.9g", cell_ap[i][j]);
            out += buf;
        }
        out += "\n";
    }
    return out;
}

DenseReport run_dense_eval(const CaptionerFactory& factory, const Vocab& vocab,
                           const std::vector<world::Scene>& scenes,
                           const DenseEvalConfig& cfg, uint64_t seed,
                           int pred_len) {
    if (scenes.empty())
        throw std::invalid_argument("eval: empty test set");
    if (pred_len < 1 || pred_len > Vocab::kMaxLen)
        throw std::invalid_argument("eval: pred_len outside 1..8");

    std::vector<DensePrediction> preds;
    std::vector<DenseGroundTruth> gts;
    std::vector<int> len_prefix = {Vocab::len_token(pred_len)};

    for (size_t si = 0; si < scenes.size(); ++si) {
        const world::Scene& scene = scenes[si];
        int image_id = static_cast<int>(si);
        Rng rng(mix_seed(mix_seed(seed, 0xDE5E1u), scene.seed));
        std::unique_ptr<SceneCaptioner> cap = factory(scene);

        std::vector<Box> proposals;
        for (size_t oi = 0; oi < scene.objects.size(); ++oi) {
            const world::ObjectSpec& obj = scene.objects[oi];
            auto words = world::caption_for(scene, static_cast<int>(oi), 3);
            gts.push_back({image_id, obj.box(), *words});
            Box b = obj.box();
            b.cx += rng.uniform(-0.05, 0.05);
            b.cy += rng.uniform(-0.05, 0.05);
            b.w = std::max(0.02, b.w + rng.uniform(-0.05, 0.05));
            b.h = std::max(0.02, b.h + rng.uniform(-0.05, 0.05));
            proposals.push_back(clamp_box(b));
        }
        for (int dI = 0; dI < 2; ++dI) {
            Box b;
            b.cx = rng.uniform(0.15, 0.85);
            b.cy = rng.uniform(0.15, 0.85);
            b.w = rng.uniform(0.1, 0.35);
            b.h = rng.uniform(0.1, 0.35);
            proposals.push_back(clamp_box(b));
        }
        for (const Box& b : proposals) {
            decode::DecodeResult r = cap->greedy(b, len_prefix, 0);
            preds.push_back({image_id, b, vocab.decode_words(r.words),
                             r.confidence()});
        }
    }
    return eval_dense_captioning(preds, gts, cfg);
}

// ---------------------------------------------------------------------------
// Prefix extraction
// ---------------------------------------------------------------------------

PrefixExtractionResult eval_prefix_extraction(
    const CaptionerFactory& factory, const Vocab& vocab,
    const std::vector<world::Scene>& scenes) {
    const int kForms = 3;  // color, size, shape
    std::vector<std::vector<int>> prefixes(kForms);
    const char* attr_words[kForms] = {"color", "size", "shape"};
    for (int f = 0; f < kForms; ++f)
        prefixes[f] = {Vocab::len_token(4), vocab.word_id("the"),
                       vocab.word_id(attr_words[f]), vocab.word_id("is")};

    int correct[kForms] = {0, 0, 0};
    PrefixExtractionResult res;
    for (const world::Scene& scene : scenes) {
        std::unique_ptr<SceneCaptioner> cap = factory(scene);
        for (const world::ObjectSpec& obj : scene.objects) {
            int truth[kForms] = {vocab.word_id(world::color_word(obj.color)),
                                 vocab.word_id(world::size_word(obj.size)),
                                 vocab.word_id(world::shape_word(obj.shape))};
            for (int f = 0; f < kForms; ++f) {
                decode::DecodeResult r = cap->greedy(obj.box(), prefixes[f], 0);
                if (!r.words.empty() && r.words[0] == truth[f])
                    ++correct[f];
            }
            res.total += 1;
        }
    }
    if (res.total > 0) {
        res.color_acc = static_cast<double>(correct[0]) / res.total;
        res.size_acc = static_cast<double>(correct[1]) / res.total;
        res.shape_acc = static_cast<double>(correct[2]) / res.total;
    }
    return res;
}

}  // namespace flexcap::eval
