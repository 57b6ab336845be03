// CLI entry point: every subcommand is a thin wrapper over one library
// call. Options can come from a flat key=value config file (# comments,
// unknown keys rejected); command-line flags win over config values.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "flexcap/dataset.hpp"
#include "flexcap/decode.hpp"
#include "flexcap/eval.hpp"
#include "flexcap/model.hpp"
#include "flexcap/prompts.hpp"
#include "flexcap/train.hpp"
#include "flexcap/vocab.hpp"
#include "flexcap/world.hpp"

namespace {

using namespace flexcap;

std::vector<int> parse_int_list(const std::string& text) {
    std::vector<int> out;
    std::string cur;
    auto flush = [&]() {
        if (cur.empty())
            throw std::runtime_error("cli: empty entry in list '" + text + "'");
        size_t used = 0;
        int v = std::stoi(cur, &used);
        if (used != cur.size())
            throw std::runtime_error("cli: bad integer '" + cur + "'");
        out.push_back(v);
        cur.clear();
    };
    for (char c : text) {
        if (c == ',')
            flush();
        else if (!std::isspace(static_cast<unsigned char>(c)))
            cur += c;
    }
    flush();
    return out;
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

// Flat key=value config file: one option per line, # starts a comment,
// blank lines ignored. Keys name long options without the leading dashes.
// Values already given on the command line win; unknown keys are errors.
void apply_config_file(CLI::App& sub, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    auto trim = [](std::string s) {
        size_t b = s.find_first_not_of(" \t\r");
        size_t e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::string entry = trim(line);
        if (entry.empty()) continue;
        size_t eq = entry.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config: " + path + ":" +
                                     std::to_string(lineno) +
                                     ": expected key=value");
        std::string key = trim(entry.substr(0, eq));
        std::string value = trim(entry.substr(eq + 1));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
            value = value.substr(1, value.size() - 2);
        if (key.empty() || key == "config")
            throw std::runtime_error("config: " + path + ":" +
                                     std::to_string(lineno) + ": bad key '" +
                                     key + "'");
        CLI::Option* opt = sub.get_option_no_throw("--" + key);
        if (!opt)
            throw std::runtime_error("config: unknown key '" + key + "' (" +
                                     path + ":" + std::to_string(lineno) + ")");
        if (opt->count() > 0) continue;  // command-line flags win
        opt->add_result(value);
        opt->run_callback();
    }
}

void log_resolved_config(const CLI::App& sub) {
    std::fprintf(stderr, "[%s] resolved config:\n", sub.get_name().c_str());
    for (const CLI::Option* opt : sub.get_options()) {
        std::string name = opt->get_name();
        if (name == "--help" || name == "--config") continue;
        while (!name.empty() && name.front() == '-') name.erase(name.begin());
        std::string value;
        if (opt->count() > 0) {
            const auto& results = opt->results();
            for (size_t i = 0; i < results.size(); ++i)
                value += (i ? "," : "") + results[i];
        } else {
            value = opt->get_default_str();
        }
        std::fprintf(stderr, "  %s=%s\n", name.c_str(), value.c_str());
    }
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cli: cannot open for write: " + path);
    out << content;
    if (!out) throw std::runtime_error("cli: write failed: " + path);
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cli: cannot open: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// emit a metric csv either to a file or to standard output
void emit_report(const std::string& out_path, const std::string& content) {
    if (out_path.empty())
        std::fputs(content.c_str(), stdout);
    else
        write_text(out_path, content);
}

void add_model_options(CLI::App* sub, model::ModelConfig& cfg) {
    sub->add_option("--image-size", cfg.image_size, "input image side, px");
    sub->add_option("--patch-size", cfg.patch_size, "vision patch side, px");
    sub->add_option("--d-model", cfg.d_model, "embedding width");
    sub->add_option("--enc-layers", cfg.enc_layers, "encoder blocks");
    sub->add_option("--dec-layers", cfg.dec_layers, "decoder blocks");
    sub->add_option("--heads", cfg.heads, "attention heads");
    sub->add_option("--max-text", cfg.max_text, "text positions");
    sub->add_option("--ff-mult", cfg.ff_mult, "feed-forward width multiple");
}

// --- subcommand bodies ------------------------------------------------------

struct GenScenesArgs {
    int count = 100;
    uint64_t seed = 1;
    std::string out;
};

void run_gen_scenes(const GenScenesArgs& a) {
    if (a.count <= 0) throw std::runtime_error("gen-scenes: count must be positive");
    std::vector<world::Scene> scenes;
    scenes.reserve(a.count);
    for (int i = 0; i < a.count; ++i)
        scenes.push_back(world::generate_scene(a.seed + static_cast<uint64_t>(i)));
    world::write_scenes(scenes, a.out);
    std::fprintf(stderr, "wrote %d scenes to %s\n", a.count, a.out.c_str());
}

struct BuildDatasetArgs {
    std::string in, out;
    data::BuildConfig cfg;
};

void run_build_dataset(const BuildDatasetArgs& a) {
    std::vector<world::Scene> scenes = world::read_scenes(a.in);
    Vocab vocab = Vocab::build();
    data::Shard shard = data::build_shard(scenes, vocab, a.cfg);
    data::write_shard(shard, a.out);
    std::fprintf(stderr, "wrote %zu scenes / %zu triplets to %s\n",
                 shard.scenes.size(), shard.triplets.size(), a.out.c_str());
}

void run_stats(const std::string& in) {
    data::Shard shard = data::read_shard(in);
    double share_len =
        data::prefix_share_fraction(shard, data::PrefixMode::length_token);
    double share_bos =
        data::prefix_share_fraction(shard, data::PrefixMode::bos_token);
    std::printf("scenes=%zu\n", shard.scenes.size());
    std::printf("triplets=%zu\n", shard.triplets.size());
    std::printf("prefix_share_length_token=%.9g\n", share_len);
    std::printf("prefix_share_bos_token=%.9g\n", share_bos);
    std::printf("caption_length_histogram:\n");
    std::vector<int> hist = data::length_histogram(shard);
    for (int k = 1; k < static_cast<int>(hist.size()); ++k)
        std::printf("%d=%d\n", k, hist[k]);
}

struct TrainArgs {
    std::string shard, out;
    model::ModelConfig mcfg;
    train::TrainConfig tcfg;
};

void run_train(const TrainArgs& a) {
    data::Shard shard = data::read_shard(a.shard);
    a.mcfg.validate();
    a.tcfg.validate();
    std::filesystem::create_directories(a.out);
    train::TrainResult result = train::train(a.mcfg, a.tcfg, shard, a.out);
    train::write_loss_curve(result.curve, a.out + "/loss_curve.csv");
    double final_loss =
        result.curve.empty() ? 0.0 : result.curve.back().loss;
    std::fprintf(stderr, "final checkpoint: %s/final.bin (loss %.6g)\n",
                 a.out.c_str(), final_loss);
}

struct DecodeArgs {
    std::string ckpt;
    uint64_t scene_seed = 1;
    int object = 0;
    int length = 3;
    std::string prefix_words;
    std::string mode = "greedy";
    double p = 0.9;
    double temperature = 1.0;
    int samples = 1;
    int max_steps = 0;
    uint64_t seed = 0;
};

void run_decode_cmd(const DecodeArgs& a) {
    model::ModelParams params = train::load_checkpoint(a.ckpt);
    world::Scene scene = world::generate_scene(a.scene_seed);
    if (a.object < 0 || a.object >= static_cast<int>(scene.objects.size()))
        throw std::runtime_error("decode: object index out of range");
    world::Image img = world::render(scene);
    Box box = scene.objects[a.object].box();

    Vocab vocab = Vocab::build();
    decode::DecodeConfig cfg;
    cfg.mode = a.mode == "nucleus" ? decode::Mode::nucleus
                                   : decode::Mode::greedy;
    cfg.p = a.p;
    cfg.temperature = a.temperature;
    cfg.samples = a.samples;
    cfg.max_steps = a.max_steps;
    cfg.seed = a.seed;
    cfg.prefix = {Vocab::len_token(a.length)};
    for (const std::string& w : split_words(a.prefix_words))
        cfg.prefix.push_back(vocab.word_id(w));

    std::vector<decode::DecodeResult> results =
        decode::run_decode(params, img, box, cfg);
    for (const decode::DecodeResult& r : results) {
        std::vector<std::string> words = vocab.decode_words(r.words);
        std::string caption;
        for (size_t i = 0; i < words.size(); ++i)
            caption += (i ? " " : "") + words[i];
        std::printf("%s\n", caption.c_str());
    }
}

struct EvalArgs {
    std::string ckpt, scenes, out;
    std::string lengths = "1,2,3,4";
    int sample_size = 0;
    int samples_per_length = 20;
    int pred_len = 3;
    double top_p = 0.9;
    double temperature = 1.0;
    uint64_t seed = 0;
};

void run_eval_length(const EvalArgs& a) {
    model::ModelParams params = train::load_checkpoint(a.ckpt);
    std::vector<world::Scene> scenes = world::read_scenes(a.scenes);
    eval::CaptionerFactory factory = eval::model_captioner_factory(params);
    std::vector<eval::ComplianceRow> rows = eval::eval_length_compliance(
        factory, scenes, parse_int_list(a.lengths), a.sample_size, a.seed);
    emit_report(a.out, eval::compliance_to_csv(rows));
}

void run_eval_region(const EvalArgs& a) {
    model::ModelParams params = train::load_checkpoint(a.ckpt);
    std::vector<world::Scene> scenes = world::read_scenes(a.scenes);
    Vocab vocab = Vocab::build();
    eval::CaptionerFactory factory =
        eval::model_captioner_factory(params, a.top_p, a.temperature);
    eval::RegionClassificationResult res = eval::eval_region_classification(
        factory, vocab, scenes, a.samples_per_length,
        parse_int_list(a.lengths), a.seed);
    char buf[128];
    std::snprintf(buf, sizeof buf, "accuracy,correct,total\n%.9g,%d,%d\n",
                  res.accuracy, res.correct, res.total);
    emit_report(a.out, buf);
}

void run_eval_dense(const EvalArgs& a) {
    model::ModelParams params = train::load_checkpoint(a.ckpt);
    std::vector<world::Scene> scenes = world::read_scenes(a.scenes);
    Vocab vocab = Vocab::build();
    eval::CaptionerFactory factory = eval::model_captioner_factory(params);
    eval::DenseReport rep = eval::run_dense_eval(
        factory, vocab, scenes, eval::DenseEvalConfig{}, a.seed, a.pred_len);
    std::printf("map=%.9g\n", rep.map);
    emit_report(a.out, rep.grid_csv());
}

void run_eval_prefix(const EvalArgs& a) {
    model::ModelParams params = train::load_checkpoint(a.ckpt);
    std::vector<world::Scene> scenes = world::read_scenes(a.scenes);
    Vocab vocab = Vocab::build();
    eval::CaptionerFactory factory = eval::model_captioner_factory(params);
    eval::PrefixExtractionResult res =
        eval::eval_prefix_extraction(factory, vocab, scenes);
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "color_acc,size_acc,shape_acc,total\n%.9g,%.9g,%.9g,%d\n",
                  res.color_acc, res.size_acc, res.shape_acc, res.total);
    emit_report(a.out, buf);
}

void run_prompt(const std::string& spec_path) {
    nlohmann::json spec = nlohmann::json::parse(read_text(spec_path));
    std::string variant = spec.at("variant").get<std::string>();
    std::string question = spec.at("question").get<std::string>();
    std::string prompt;
    if (variant == "video") {
        std::vector<prompts::FrameCaptions> frames;
        for (const auto& jframe : spec.value("frames", nlohmann::json::array())) {
            prompts::FrameCaptions frame;
            frame.index = jframe.at("index").get<int>();
            for (const auto& c : jframe.at("captions"))
                frame.captions.push_back(c.get<std::string>());
            frames.push_back(std::move(frame));
        }
        prompt = prompts::build_video_prompt(frames, question);
    } else if (variant == "standard" || variant == "vizwiz") {
        std::vector<std::string> image_captions;
        for (const auto& c :
             spec.value("image_captions", nlohmann::json::array()))
            image_captions.push_back(c.get<std::string>());
        std::vector<prompts::ObjectLine> objects;
        for (const auto& jobj : spec.value("objects", nlohmann::json::array())) {
            prompts::ObjectLine line;
            for (const auto& c : jobj.at("captions"))
                line.captions.push_back(c.get<std::string>());
            const auto& box = jobj.at("box");
            if (box.size() != 4)
                throw std::runtime_error("prompt: box needs 4 integers");
            line.cx = box[0].get<int>();
            line.cy = box[1].get<int>();
            line.w = box[2].get<int>();
            line.h = box[3].get<int>();
            if (jobj.contains("score"))
                line.score = jobj.at("score").get<double>();
            objects.push_back(std::move(line));
        }
        prompt = prompts::build_vqa_prompt(
            spec.at("image_width").get<int>(),
            spec.at("image_height").get<int>(), image_captions, objects,
            question,
            variant == "vizwiz" ? prompts::Variant::vizwiz
                                : prompts::Variant::standard);
    } else {
        throw std::runtime_error("prompt: variant must be standard, vizwiz, "
                                 "or video");
    }
    std::printf("%s\n", prompt.c_str());
}

struct GradCheckArgs {
    model::ModelConfig mcfg;
    int batch = 2;
    double eps = 1e-4;
    double threshold = 1e-4;
    uint64_t seed = 41;
};

void run_grad_check(const GradCheckArgs& a) {
    model::ModelConfig cfg = a.mcfg;
    cfg.validate();
    model::ModelParamsT<double> params =
        model::init_params_t<double>(cfg, a.seed);
    // evaluate away from the tiny-sigma init so every gradient coordinate
    // clears the checker's denominator floor
    params.for_each([](const std::string& name, TensorT<double>& t) {
        bool gain_or_bias =
            name.size() >= 2 && (name.compare(name.size() - 2, 2, ".g") == 0 ||
                                 name.compare(name.size() - 2, 2, ".b") == 0);
        if (!gain_or_bias)
            for (double& v : t.data) v *= 5.0;
    });

    Rng rng(mix_seed(a.seed, 0xF00Du));
    std::vector<world::Image> images(a.batch);
    for (world::Image& img : images) {
        img.size = cfg.image_size;
        img.data.resize(static_cast<size_t>(cfg.image_size) *
                        cfg.image_size * 3);
        for (float& v : img.data) v = static_cast<float>(rng.uniform());
    }
    std::vector<std::vector<int>> tokens(a.batch);
    std::vector<model::Example> batch;
    for (int i = 0; i < a.batch; ++i) {
        int len = 1 + static_cast<int>(rng.uniform_int(2));
        std::vector<int>& t = tokens[i];
        t.push_back(Vocab::len_token(len));
        for (int w = 0; w < len; ++w)
            t.push_back(Vocab::kFirstWord +
                        static_cast<int>(rng.uniform_int(
                            cfg.vocab_size - Vocab::kFirstWord)));
        t.push_back(Vocab::kEos);
        t.resize(cfg.max_text, Vocab::kPad);
        Box box{rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7),
                rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)};
        batch.push_back({&images[i], box, &tokens[i]});
    }

    model::ModelParamsT<double> grads = model::zeros_like(params);
    double loss = model::flexcap_loss_and_grad(params, batch, grads);
    std::vector<double> flat = model::flatten_params(params);
    std::vector<double> analytic = model::flatten_params(grads);
    model::ModelParamsT<double> probe;
    probe.resize(cfg);
    auto f = [&](const std::vector<double>& x) {
        model::unflatten_params(x, probe);
        return model::flexcap_loss(probe, batch);
    };
    nn::GradCheckResult res = nn::grad_check(f, flat, analytic, a.eps);
    std::printf("params=%zu loss=%.9g max_rel_err=%.9g worst_index=%zu\n",
                flat.size(), loss, res.max_rel_err, res.worst_index);
    if (res.max_rel_err >= a.threshold) {
        std::printf("grad-check: FAIL (threshold %.3g)\n", a.threshold);
        throw std::runtime_error("grad-check: max relative error above threshold");
    }
    std::printf("grad-check: PASS (threshold %.3g)\n", a.threshold);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"length-conditioned region captioner"};
    app.option_defaults()->always_capture_default(true);
    app.require_subcommand(1);

    // every subcommand gets --config plus the same run preamble: apply the
    // config file (flags win), log the resolved options, run the body
    std::deque<std::string> config_paths;
    auto wire = [&config_paths](CLI::App* sub, std::function<void()> body) {
        config_paths.emplace_back();
        std::string* path = &config_paths.back();
        sub->add_option("--config", *path,
                        "flat key=value config file; flags win");
        sub->callback([sub, path, body = std::move(body)]() {
            if (!path->empty()) apply_config_file(*sub, *path);
            log_resolved_config(*sub);
            body();
        });
    };

    GenScenesArgs gen;
    CLI::App* gen_cmd =
        app.add_subcommand("gen-scenes", "generate world scenes");
    gen_cmd->add_option("--count", gen.count, "number of scenes");
    gen_cmd->add_option("--seed", gen.seed, "seed of the first scene");
    gen_cmd->add_option("--out", gen.out, "output scenes jsonl")->required();
    wire(gen_cmd, [&]() { run_gen_scenes(gen); });

    BuildDatasetArgs build;
    CLI::App* build_cmd =
        app.add_subcommand("build-dataset", "scenes -> caption triplets");
    build_cmd->add_option("--in", build.in, "input scenes jsonl")->required();
    build_cmd->add_option("--out", build.out, "output shard jsonl")->required();
    build_cmd->add_option("--n-max", build.cfg.n_max, "longest n-gram");
    build_cmd->add_option("--threshold", build.cfg.threshold,
                          "match score threshold");
    build_cmd->add_option("--p-attr", build.cfg.p_attr,
                          "attribute caption injection probability");
    build_cmd->add_option("--seed", build.cfg.seed, "pipeline seed");
    wire(build_cmd, [&]() { run_build_dataset(build); });

    std::string stats_in;
    CLI::App* stats_cmd =
        app.add_subcommand("stats", "prefix-share fractions and histogram");
    stats_cmd->add_option("--in", stats_in, "input shard jsonl")->required();
    wire(stats_cmd, [&]() { run_stats(stats_in); });

    TrainArgs tr;
    CLI::App* train_cmd = app.add_subcommand("train", "train the captioner");
    train_cmd->add_option("--shard", tr.shard, "training shard jsonl")
        ->required();
    train_cmd->add_option("--out", tr.out, "checkpoint directory")->required();
    add_model_options(train_cmd, tr.mcfg);
    train_cmd->add_option("--steps", tr.tcfg.steps, "optimization steps");
    train_cmd->add_option("--batch-size", tr.tcfg.batch_size, "examples/step");
    train_cmd->add_option("--peak-lr", tr.tcfg.peak_lr, "peak learning rate");
    train_cmd->add_option("--warmup", tr.tcfg.warmup, "warmup steps");
    train_cmd->add_option("--weight-decay", tr.tcfg.weight_decay,
                          "AdamW weight decay");
    train_cmd->add_option("--max-boxes", tr.tcfg.max_boxes,
                          "boxes per scene visit");
    train_cmd->add_option("--init-seed", tr.tcfg.init_seed, "weight init seed");
    train_cmd->add_option("--data-seed", tr.tcfg.data_seed,
                          "batch sampling seed");
    train_cmd->add_option("--checkpoint-every", tr.tcfg.checkpoint_every,
                          "checkpoint cadence, 0 = final only");
    train_cmd->add_option("--grad-clip", tr.tcfg.grad_clip,
                          "global-norm clip, <=0 disables");
    wire(train_cmd, [&]() { run_train(tr); });

    DecodeArgs dec;
    CLI::App* decode_cmd =
        app.add_subcommand("decode", "caption one region of a scene");
    decode_cmd->add_option("--ckpt", dec.ckpt, "checkpoint file")->required();
    decode_cmd->add_option("--scene-seed", dec.scene_seed, "scene to render");
    decode_cmd->add_option("--object", dec.object, "object index in scene");
    decode_cmd->add_option("--length", dec.length, "target caption length");
    decode_cmd->add_option("--prefix-words", dec.prefix_words,
                           "words forced after the length token");
    decode_cmd->add_option("--mode", dec.mode, "decoding mode")
        ->check(CLI::IsMember({"greedy", "nucleus"}));
    decode_cmd->add_option("--p", dec.p, "nucleus mass");
    decode_cmd->add_option("--temperature", dec.temperature,
                           "softmax temperature");
    decode_cmd->add_option("--samples", dec.samples, "nucleus rollouts");
    decode_cmd->add_option("--max-steps", dec.max_steps,
                           "step cap, 0 = text capacity");
    decode_cmd->add_option("--seed", dec.seed, "sampling seed");
    wire(decode_cmd, [&]() { run_decode_cmd(dec); });

    EvalArgs ev_len, ev_region, ev_dense, ev_prefix;
    CLI::App* eval_len_cmd =
        app.add_subcommand("eval-length", "length compliance report");
    eval_len_cmd->add_option("--ckpt", ev_len.ckpt, "checkpoint file")
        ->required();
    eval_len_cmd->add_option("--scenes", ev_len.scenes, "test scenes jsonl")
        ->required();
    eval_len_cmd->add_option("--lengths", ev_len.lengths,
                             "target lengths, comma separated");
    eval_len_cmd->add_option("--sample-size", ev_len.sample_size,
                             "scene cap, 0 = all");
    eval_len_cmd->add_option("--seed", ev_len.seed, "object pick seed");
    eval_len_cmd->add_option("--out", ev_len.out, "csv path, empty = stdout");
    wire(eval_len_cmd, [&]() { run_eval_length(ev_len); });

    CLI::App* eval_region_cmd =
        app.add_subcommand("eval-region", "region classification accuracy");
    eval_region_cmd->add_option("--ckpt", ev_region.ckpt, "checkpoint file")
        ->required();
    eval_region_cmd
        ->add_option("--scenes", ev_region.scenes, "test scenes jsonl")
        ->required();
    eval_region_cmd->add_option("--samples-per-length",
                                ev_region.samples_per_length,
                                "nucleus rollouts per length");
    eval_region_cmd->add_option("--lengths", ev_region.lengths,
                                "prompt lengths, comma separated");
    eval_region_cmd->add_option("--top-p", ev_region.top_p, "nucleus mass");
    eval_region_cmd->add_option("--temperature", ev_region.temperature,
                                "softmax temperature");
    eval_region_cmd->add_option("--seed", ev_region.seed, "sampling seed");
    eval_region_cmd->add_option("--out", ev_region.out,
                                "csv path, empty = stdout");
    wire(eval_region_cmd, [&]() { run_eval_region(ev_region); });

    CLI::App* eval_dense_cmd =
        app.add_subcommand("eval-dense", "dense captioning mAP grid");
    eval_dense_cmd->add_option("--ckpt", ev_dense.ckpt, "checkpoint file")
        ->required();
    eval_dense_cmd->add_option("--scenes", ev_dense.scenes, "test scenes jsonl")
        ->required();
    eval_dense_cmd->add_option("--pred-len", ev_dense.pred_len,
                               "prediction caption length");
    eval_dense_cmd->add_option("--seed", ev_dense.seed, "proposal jitter seed");
    eval_dense_cmd->add_option("--out", ev_dense.out,
                               "grid csv path, empty = stdout");
    wire(eval_dense_cmd, [&]() { run_eval_dense(ev_dense); });

    CLI::App* eval_prefix_cmd = app.add_subcommand(
        "eval-prefix", "attribute extraction via prefix conditioning");
    eval_prefix_cmd->add_option("--ckpt", ev_prefix.ckpt, "checkpoint file")
        ->required();
    eval_prefix_cmd
        ->add_option("--scenes", ev_prefix.scenes, "test scenes jsonl")
        ->required();
    eval_prefix_cmd->add_option("--out", ev_prefix.out,
                                "csv path, empty = stdout");
    wire(eval_prefix_cmd, [&]() { run_eval_prefix(ev_prefix); });

    std::string prompt_spec;
    CLI::App* prompt_cmd =
        app.add_subcommand("prompt", "assemble a question-answering prompt");
    prompt_cmd->add_option("--spec", prompt_spec, "prompt spec json file")
        ->required();
    wire(prompt_cmd, [&]() { run_prompt(prompt_spec); });

    GradCheckArgs gc;
    gc.mcfg.image_size = 16;
    gc.mcfg.patch_size = 8;
    gc.mcfg.d_model = 16;
    gc.mcfg.enc_layers = 1;
    gc.mcfg.dec_layers = 1;
    gc.mcfg.heads = 2;
    gc.mcfg.max_text = 6;
    gc.mcfg.ff_mult = 2;
    CLI::App* grad_cmd = app.add_subcommand(
        "grad-check", "finite-difference check of the full loss gradient");
    add_model_options(grad_cmd, gc.mcfg);
    grad_cmd->add_option("--batch", gc.batch, "examples in the probe batch");
    grad_cmd->add_option("--eps", gc.eps, "central difference step");
    grad_cmd->add_option("--threshold", gc.threshold,
                         "max relative error allowed");
    grad_cmd->add_option("--seed", gc.seed, "probe seed");
    wire(grad_cmd, [&]() { run_grad_check(gc); });

    try {
        app.parse(argc, argv);
        return 0;
    } catch (const CLI::Success& e) {
        return app.exit(e);  // --help and friends
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints the usage message
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
