#include "rqat/workflow.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include <json.hpp>

#include "rqat/packing.hpp"

namespace rqat::workflow {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// config (de)serialization

namespace {

std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::uint64_t p : parts) h = fnv1a64(&p, sizeof(p), h);
    return h;
}

json model_to_json(const model::ModelConfig& m) {
    return {{"vocab_size", m.vocab_size}, {"d_model", m.d_model}, {"n_layers", m.n_layers},
            {"n_heads", m.n_heads},       {"d_ff", m.d_ff},       {"max_seq_len", m.max_seq_len}};
}

model::ModelConfig model_from_json(const json& j) {
    model::ModelConfig m;
    m.vocab_size = j.value("vocab_size", m.vocab_size);
    m.d_model = j.value("d_model", m.d_model);
    m.n_layers = j.value("n_layers", m.n_layers);
    m.n_heads = j.value("n_heads", m.n_heads);
    m.d_ff = j.value("d_ff", m.d_ff);
    m.max_seq_len = j.value("max_seq_len", m.max_seq_len);
    return m;
}

json data_to_json(const taskgen::ArithTaskConfig& d) {
    return {{"n_operands", d.n_operands}, {"lo", d.lo},           {"hi", d.hi},
            {"operators", d.operators},   {"n_train", d.n_train}, {"n_eval", d.n_eval},
            {"n_calib", d.n_calib},       {"seed", d.seed},       {"max_seq_len", d.max_seq_len}};
}

taskgen::ArithTaskConfig data_from_json(const json& j) {
    taskgen::ArithTaskConfig d;
    d.n_operands = j.value("n_operands", d.n_operands);
    d.lo = j.value("lo", d.lo);
    d.hi = j.value("hi", d.hi);
    d.operators = j.value("operators", d.operators);
    d.n_train = j.value("n_train", d.n_train);
    d.n_eval = j.value("n_eval", d.n_eval);
    d.n_calib = j.value("n_calib", d.n_calib);
    d.seed = j.value("seed", d.seed);
    d.max_seq_len = j.value("max_seq_len", d.max_seq_len);
    return d;
}

json sampler_to_json(const model::SamplerConfig& s) {
    return {{"temperature", s.temperature},
            {"top_p", s.top_p},
            {"max_new_tokens", s.max_new_tokens}};
}

model::SamplerConfig sampler_from_json(const json& j) {
    model::SamplerConfig s;
    s.temperature = j.value("temperature", s.temperature);
    s.top_p = j.value("top_p", s.top_p);
    s.max_new_tokens = j.value("max_new_tokens", s.max_new_tokens);
    return s;
}

}  // namespace

void WorkflowConfig::validate() const {
    model.validate();
    data.validate();
    if (teacher.mode != "train" && teacher.mode != "load")
        throw ConfigError("WorkflowConfig: teacher.mode must be train|load");
    if (teacher.mode == "load" && teacher.path.empty())
        throw ConfigError("WorkflowConfig: teacher.mode=load requires teacher.path");
    if (init.method != "rtn" && init.method != "gptq")
        throw ConfigError("WorkflowConfig: init.method must be rtn|gptq");
    if (init.calib != "in_domain" && init.calib != "out_of_domain")
        throw ConfigError("WorkflowConfig: init.calib must be in_domain|out_of_domain");
    if (init.scheme != "asymmetric" && init.scheme != "symmetric")
        throw ConfigError("WorkflowConfig: init.scheme must be asymmetric|symmetric");
    if (init.bits != 0 && (init.bits < 2 || init.bits > 8))
        throw ConfigError("WorkflowConfig: init.bits must be 0 (adaptive) or in [2,8]");
    if (stage2.objective != "sft" && stage2.objective != "kd" && stage2.objective != "none")
        throw ConfigError("WorkflowConfig: stage2.objective must be sft|kd|none");
    if (!(stage2.kd_temperature > 0.0))
        throw ConfigError("WorkflowConfig: stage2.kd_temperature must be > 0");
    if (stage3.objective != "grpo" && stage3.objective != "none")
        throw ConfigError("WorkflowConfig: stage3.objective must be grpo|none");
    if (stage3.objective == "grpo" && stage2.objective == "none" && !stage3.allow_zero_rl)
        throw ConfigError(
            "WorkflowConfig: GRPO requires a cold-start checkpoint (stage-2 KD/SFT recovery); "
            "zero-RL from a raw PTQ init must be requested explicitly with allow_zero_rl");
    if (seeds.empty()) throw ConfigError("WorkflowConfig: empty workflow seed list");
    if (eval.seeds.empty()) throw ConfigError("WorkflowConfig: empty eval seed list");
    if (output_dir.empty()) throw ConfigError("WorkflowConfig: empty output_dir");
}

std::string WorkflowConfig::to_json() const {
    json j;
    j["model"] = model_to_json(model);
    j["data"] = data_to_json(data);
    j["teacher"] = {{"mode", teacher.mode},
                    {"path", teacher.path},
                    {"steps", teacher.steps},
                    {"batch", teacher.batch},
                    {"peak_lr", teacher.peak_lr},
                    {"warmup", teacher.warmup},
                    {"target_accuracy", teacher.target_accuracy},
                    {"eval_interval", teacher.eval_interval}};
    j["init"] = {{"method", init.method},       {"calib", init.calib},
                 {"scheme", init.scheme},
                 {"bits", init.bits},           {"group_size", init.group_size},
                 {"act_order", init.act_order}, {"calib_tokens", init.calib_tokens}};
    j["stage2"] = {{"objective", stage2.objective},
                   {"kd_temperature", stage2.kd_temperature},
                   {"steps", stage2.steps},
                   {"batch", stage2.batch},
                   {"peak_lr", stage2.peak_lr},
                   {"warmup", stage2.warmup},
                   {"eval_interval", stage2.eval_interval},
                   {"checkpoint_interval", stage2.checkpoint_interval}};
    j["stage3"] = {{"objective", stage3.objective},
                   {"steps", stage3.steps},
                   {"group_size", stage3.grpo.group_size},
                   {"clip_eps", stage3.grpo.clip_eps},
                   {"kl_coef", stage3.grpo.kl_coef},
                   {"std_eps", stage3.grpo.std_eps},
                   {"rollout_max_len", stage3.grpo.rollout_max_len},
                   {"batch_prompts", stage3.grpo.batch_prompts},
                   {"peak_lr", stage3.peak_lr},
                   {"warmup", stage3.warmup},
                   {"allow_zero_rl", stage3.allow_zero_rl},
                   {"eval_interval", stage3.eval_interval},
                   {"checkpoint_interval", stage3.checkpoint_interval}};
    j["eval"] = {{"sampler", sampler_to_json(eval.sampler)},
                 {"seeds", eval.seeds},
                 {"n_problems", eval.n_problems}};
    j["seeds"] = seeds;
    j["output_dir"] = output_dir;
    return j.dump(2);
}

WorkflowConfig WorkflowConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("WorkflowConfig: parse error: ") + e.what());
    }
    WorkflowConfig c;
    try {
        if (j.contains("model")) c.model = model_from_json(j["model"]);
        if (j.contains("data")) c.data = data_from_json(j["data"]);
        if (j.contains("teacher")) {
            const json& t = j["teacher"];
            c.teacher.mode = t.value("mode", c.teacher.mode);
            c.teacher.path = t.value("path", c.teacher.path);
            c.teacher.steps = t.value("steps", c.teacher.steps);
            c.teacher.batch = t.value("batch", c.teacher.batch);
            c.teacher.peak_lr = t.value("peak_lr", c.teacher.peak_lr);
            c.teacher.warmup = t.value("warmup", c.teacher.warmup);
            c.teacher.target_accuracy = t.value("target_accuracy", c.teacher.target_accuracy);
            c.teacher.eval_interval = t.value("eval_interval", c.teacher.eval_interval);
        }
        if (j.contains("init")) {
            const json& t = j["init"];
            c.init.method = t.value("method", c.init.method);
            c.init.calib = t.value("calib", c.init.calib);
            c.init.scheme = t.value("scheme", c.init.scheme);
            c.init.bits = t.value("bits", c.init.bits);
            c.init.group_size = t.value("group_size", c.init.group_size);
            c.init.act_order = t.value("act_order", c.init.act_order);
            c.init.calib_tokens = t.value("calib_tokens", c.init.calib_tokens);
        }
        if (j.contains("stage2")) {
            const json& t = j["stage2"];
            c.stage2.objective = t.value("objective", c.stage2.objective);
            c.stage2.kd_temperature = t.value("kd_temperature", c.stage2.kd_temperature);
            c.stage2.steps = t.value("steps", c.stage2.steps);
            c.stage2.batch = t.value("batch", c.stage2.batch);
            c.stage2.peak_lr = t.value("peak_lr", c.stage2.peak_lr);
            c.stage2.warmup = t.value("warmup", c.stage2.warmup);
            c.stage2.eval_interval = t.value("eval_interval", c.stage2.eval_interval);
            c.stage2.checkpoint_interval =
                t.value("checkpoint_interval", c.stage2.checkpoint_interval);
        }
        if (j.contains("stage3")) {
            const json& t = j["stage3"];
            c.stage3.objective = t.value("objective", c.stage3.objective);
            c.stage3.steps = t.value("steps", c.stage3.steps);
            c.stage3.grpo.group_size = t.value("group_size", c.stage3.grpo.group_size);
            c.stage3.grpo.clip_eps = t.value("clip_eps", c.stage3.grpo.clip_eps);
            c.stage3.grpo.kl_coef = t.value("kl_coef", c.stage3.grpo.kl_coef);
            c.stage3.grpo.std_eps = t.value("std_eps", c.stage3.grpo.std_eps);
            c.stage3.grpo.rollout_max_len =
                t.value("rollout_max_len", c.stage3.grpo.rollout_max_len);
            c.stage3.grpo.batch_prompts = t.value("batch_prompts", c.stage3.grpo.batch_prompts);
            c.stage3.peak_lr = t.value("peak_lr", c.stage3.peak_lr);
            c.stage3.warmup = t.value("warmup", c.stage3.warmup);
            c.stage3.allow_zero_rl = t.value("allow_zero_rl", c.stage3.allow_zero_rl);
            c.stage3.eval_interval = t.value("eval_interval", c.stage3.eval_interval);
            c.stage3.checkpoint_interval =
                t.value("checkpoint_interval", c.stage3.checkpoint_interval);
        }
        if (j.contains("eval")) {
            const json& t = j["eval"];
            if (t.contains("sampler")) c.eval.sampler = sampler_from_json(t["sampler"]);
            if (t.contains("seeds")) c.eval.seeds = t["seeds"].get<std::vector<std::uint64_t>>();
            c.eval.n_problems = t.value("n_problems", c.eval.n_problems);
        }
        if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
        c.output_dir = j.value("output_dir", c.output_dir);
    } catch (const json::exception& e) {
        throw FormatError(std::string("WorkflowConfig: bad field: ") + e.what());
    }
    return c;
}

WorkflowConfig WorkflowConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("WorkflowConfig: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

// ---------------------------------------------------------------------------
// manifest

namespace {

json report_to_json(const evalrun::EvalReport& r) { return json::parse(r.to_json()); }

evalrun::EvalReport report_from_json(const json& j) {
    evalrun::EvalReport r;
    r.accuracy = j.at("accuracy").get<double>();
    r.mean_response_length = j.at("mean_response_length").get<double>();
    r.mean_token_entropy = j.at("mean_token_entropy").get<double>();
    r.n_problems = j.at("n_problems").get<std::size_t>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    for (const auto& s : j.at("per_seed")) {
        evalrun::SeedResult sr;
        sr.seed = s.at("seed").get<std::uint64_t>();
        sr.accuracy = s.at("accuracy").get<double>();
        sr.mean_response_length = s.at("mean_response_length").get<double>();
        sr.mean_token_entropy = s.at("mean_token_entropy").get<double>();
        r.per_seed.push_back(sr);
    }
    return r;
}

void atomic_write(const std::string& path, const std::string& text) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw FormatError("cannot open " + tmp);
        out << text;
    }
    fs::rename(tmp, path);
}

}  // namespace

std::string RunManifest::path() const {
    return (fs::path(config.output_dir) / "manifest.json").string();
}

void RunManifest::save() const {
    json j;
    j["code_version"] = code_version;
    j["config"] = json::parse(config.to_json());
    j["bits"] = bits;
    j["teacher_accuracy"] = teacher_accuracy;
    j["mean_final_accuracy"] = mean_final_accuracy;
    j["stages"] = json::array();
    for (const auto& s : stages) {
        j["stages"].push_back({{"name", s.name},
                               {"status", s.status},
                               {"input_digests", s.input_digests},
                               {"output", s.output},
                               {"output_digest", s.output_digest},
                               {"wall_clock_s", s.wall_clock_s},
                               {"progress_step", s.progress_step},
                               {"error", s.error}});
    }
    j["evals"] = json::array();
    for (const auto& e : evals) {
        j["evals"].push_back(
            {{"stage", e.stage}, {"run_seed", e.run_seed}, {"report", report_to_json(e.report)}});
    }
    fs::create_directories(config.output_dir);
    atomic_write(path(), j.dump(2) + "\n");
}

RunManifest RunManifest::load(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw FormatError("RunManifest: cannot open " + manifest_path);
    std::stringstream ss;
    ss << in.rdbuf();
    json j;
    try {
        j = json::parse(ss.str());
    } catch (const json::exception& e) {
        throw FormatError("RunManifest: parse error: " + std::string(e.what()));
    }
    RunManifest m;
    try {
        m.code_version = j.at("code_version").get<std::string>();
        m.config = WorkflowConfig::from_json(j.at("config").dump());
        m.bits = j.at("bits").get<int>();
        m.teacher_accuracy = j.at("teacher_accuracy").get<double>();
        m.mean_final_accuracy = j.value("mean_final_accuracy", 0.0);
        for (const auto& s : j.at("stages")) {
            StageRecord r;
            r.name = s.at("name").get<std::string>();
            r.status = s.at("status").get<std::string>();
            r.input_digests = s.at("input_digests").get<std::vector<std::string>>();
            r.output = s.at("output").get<std::string>();
            r.output_digest = s.at("output_digest").get<std::string>();
            r.wall_clock_s = s.at("wall_clock_s").get<double>();
            r.progress_step = s.at("progress_step").get<std::size_t>();
            r.error = s.value("error", "");
            m.stages.push_back(std::move(r));
        }
        for (const auto& e : j.at("evals")) {
            StageEval ev;
            ev.stage = e.at("stage").get<std::string>();
            ev.run_seed = e.at("run_seed").get<std::uint64_t>();
            ev.report = report_from_json(e.at("report"));
            m.evals.push_back(std::move(ev));
        }
    } catch (const json::exception& e) {
        throw FormatError("RunManifest: bad field: " + std::string(e.what()));
    }
    return m;
}

const StageRecord* RunManifest::find(const std::string& name) const {
    for (const auto& s : stages)
        if (s.name == name) return &s;
    return nullptr;
}

std::optional<double> RunManifest::stage_mean_accuracy(const std::string& stage) const {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& e : evals) {
        // match either an exact stage name or the per-seed suffix form
        auto slash = e.stage.find('/');
        std::string suffix = slash == std::string::npos ? e.stage : e.stage.substr(slash + 1);
        if (e.stage == stage || suffix == stage) {
            total += e.report.accuracy;
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// stage helpers

namespace {

std::vector<taskgen::Example> eval_subset(const std::vector<taskgen::Example>& full,
                                          std::size_t n_problems) {
    if (n_problems == 0 || n_problems >= full.size()) return full;
    return {full.begin(), full.begin() + static_cast<std::ptrdiff_t>(n_problems)};
}

std::vector<taskgen::Example> pick_batch(const std::vector<taskgen::Example>& train,
                                         std::size_t batch, std::uint64_t seed, std::size_t step) {
    std::vector<taskgen::Example> out;
    for (std::size_t j = 0; j < batch; ++j) {
        std::uint64_t h = mix_seed({seed, 0x6261746368ULL, step, j});
        out.push_back(train[h % train.size()]);
    }
    return out;
}

double now_s() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

}  // namespace

void save_opt_state(const std::string& path, const model::TinyDecoder& m, std::size_t step) {
    packing::TensorMap t;
    for (const auto& [name, p] : m.params()) {
        if (p.adam_m.empty()) continue;
        t["m/" + name] = packing::DenseTensor{p.shape, p.adam_m};
        t["v/" + name] = packing::DenseTensor{p.shape, p.adam_v};
    }
    json meta;
    meta["kind"] = "optimizer-state";
    meta["step"] = step;
    packing::save_checkpoint(path, t, meta.dump());
}

std::size_t load_opt_state(const std::string& path, model::TinyDecoder& m) {
    std::string meta_text;
    packing::TensorMap t = packing::load_checkpoint(path, &meta_text);
    json meta = json::parse(meta_text);
    if (meta.value("kind", "") != "optimizer-state")
        throw FormatError(path + ": not an optimizer-state checkpoint");
    for (auto& [name, p] : m.params()) {
        auto mi = t.find("m/" + name);
        auto vi = t.find("v/" + name);
        if (mi == t.end() || vi == t.end()) continue;
        p.adam_m = std::get<packing::DenseTensor>(mi->second).data;
        p.adam_v = std::get<packing::DenseTensor>(vi->second).data;
    }
    return meta.at("step").get<std::size_t>();
}

model::TinyDecoder train_teacher(const model::ModelConfig& mcfg, const TeacherConfig& tcfg,
                                 const taskgen::Dataset& data, const EvalConfig& eval,
                                 const std::string& metrics_path, std::uint64_t seed) {
    model::ModelConfig cfg = mcfg;
    cfg.quant.reset();  // teacher is full precision
    model::TinyDecoder m(cfg, mix_seed({seed, 0x7465616368ULL}));

    objectives::OptimizerConfig opt;
    opt.peak_lr = tcfg.peak_lr;
    opt.warmup_steps = std::min(tcfg.warmup, tcfg.steps);
    opt.total_steps = tcfg.steps;
    opt.global_batch = tcfg.batch;

    const std::vector<taskgen::Example> eval_probe = eval_subset(data.eval, 64);
    const double t0 = now_s();
    for (std::size_t step = 1; step <= tcfg.steps; ++step) {
        auto batch = objectives::make_batch(pick_batch(data.train, tcfg.batch, seed, step));
        model::ForwardContext ctx = m.make_context();
        ad::Tensor loss = objectives::sft_loss(m, ctx, batch);
        m.zero_grads();
        ad::backward(loss);
        m.absorb_grads(ctx);
        objectives::optimizer_step(m, opt, step);

        bool probe = (tcfg.eval_interval > 0 && step % tcfg.eval_interval == 0) ||
                     step == tcfg.steps;
        evalrun::MetricRecord rec;
        rec.step = step;
        rec.stage = "teacher";
        rec.loss = loss.item();
        rec.lr = objectives::lr_at(opt, step);
        rec.wall_clock_s = now_s() - t0;
        if (probe) {
            auto report = evalrun::evaluate(m, eval_probe, eval.sampler, {eval.seeds.front()});
            rec.eval_accuracy = report.accuracy;
            rec.mean_length = report.mean_response_length;
            rec.entropy = report.mean_token_entropy;
            if (!metrics_path.empty()) evalrun::log_metrics(metrics_path, rec);
            if (report.accuracy >= tcfg.target_accuracy) break;
        } else if (!metrics_path.empty()) {
            evalrun::log_metrics(metrics_path, rec);
        }
    }
    return m;
}

model::TinyDecoder ptq_init(const model::TinyDecoder& teacher, const InitConfig& init, int bits,
                            const taskgen::ArithTaskConfig& data_cfg, std::uint64_t seed) {
    if (bits < 2 || bits > 8) throw ConfigError("ptq_init: bits must be in [2,8]");
    quant::QuantSpec spec;
    spec.bits = bits;
    spec.group_size = init.group_size;
    spec.scheme = init.scheme == "symmetric" ? quant::Scheme::Symmetric
                                             : quant::Scheme::Asymmetric;
    spec.granularity = quant::Granularity::PerGroupWeight;

    model::TinyDecoder student = teacher;

    std::map<std::string, ptq::HessianAccumulator> hessians;
    if (init.method == "gptq") {
        taskgen::CalibKind kind = init.calib == "in_domain" ? taskgen::CalibKind::InDomain
                                                           : taskgen::CalibKind::OutOfDomain;
        auto calib = taskgen::make_calibration(kind, init.calib_tokens,
                                               mix_seed({seed, 0x63616c6962ULL}), data_cfg);
        hessians = ptq::calibrate_model(teacher, calib);
    }

    for (const std::string& name : student.quantizable_layers()) {
        auto [out_f, in_f] = student.layer_shape(name);
        auto& p = student.params().at(name);
        ptq::PtqResult r;
        if (init.method == "rtn") {
            r = ptq::rtn(p.value, out_f, in_f, spec);
        } else {
            ptq::GptqOptions opts;
            opts.act_order = init.act_order;
            r = ptq::gptq(p.value, out_f, in_f, hessians.at(name), spec, opts);
        }
        p.value = r.latent;
        p.adam_m.clear();
        p.adam_v.clear();
        student.frozen_params()[name] = r.quantized.params;
    }

    ad::FakeQuantConfig fq;
    fq.spec = spec;
    fq.mode = ad::FakeQuantMode::Frozen;
    student.mutable_config().quant = fq;
    student.mutable_config().validate();
    // stage boundaries reset the optimizer
    for (auto& [name, p] : student.params()) {
        p.adam_m.clear();
        p.adam_v.clear();
        p.grad.clear();
    }
    return student;
}

void recovery_stage(model::TinyDecoder& student, const model::TinyDecoder& teacher,
                    const Stage2Config& cfg, const taskgen::Dataset& data, const EvalConfig& eval,
                    const std::string& metrics_path, std::uint64_t seed,
                    const std::string& progress_model, const std::string& progress_opt) {
    if (cfg.objective != "sft" && cfg.objective != "kd")
        throw ConfigError("recovery_stage: objective must be sft|kd");

    objectives::OptimizerConfig opt;
    opt.peak_lr = cfg.peak_lr;
    opt.warmup_steps = std::min(cfg.warmup, cfg.steps);
    opt.total_steps = cfg.steps;
    opt.global_batch = cfg.batch;

    std::size_t start_step = 0;
    if (!progress_model.empty() && fs::exists(progress_model) && fs::exists(progress_opt)) {
        student = model::TinyDecoder::load(progress_model);
        start_step = load_opt_state(progress_opt, student);
    }

    model::InferenceSession teacher_session(teacher);
    const std::vector<taskgen::Example> eval_probe = eval_subset(data.eval, 64);
    const double t0 = now_s();
    const std::string stage_tag = cfg.objective;

    for (std::size_t step = start_step + 1; step <= cfg.steps; ++step) {
        auto batch = objectives::make_batch(pick_batch(data.train, cfg.batch, seed, step));
        model::ForwardContext ctx = student.make_context();
        ad::Tensor loss =
            cfg.objective == "kd"
                ? objectives::kd_loss(student, ctx, teacher_session, batch, cfg.kd_temperature)
                : objectives::sft_loss(student, ctx, batch);
        student.zero_grads();
        ad::backward(loss);
        student.absorb_grads(ctx);
        objectives::optimizer_step(student, opt, step);

        evalrun::MetricRecord rec;
        rec.step = step;
        rec.stage = stage_tag;
        rec.loss = loss.item();
        rec.lr = objectives::lr_at(opt, step);
        rec.wall_clock_s = now_s() - t0;
        if (cfg.eval_interval > 0 && (step % cfg.eval_interval == 0 || step == cfg.steps)) {
            auto report = evalrun::evaluate(student, eval_probe, eval.sampler,
                                            {eval.seeds.front()});
            rec.eval_accuracy = report.accuracy;
            rec.mean_length = report.mean_response_length;
            rec.entropy = report.mean_token_entropy;
        }
        if (!metrics_path.empty()) evalrun::log_metrics(metrics_path, rec);

        if (!progress_model.empty() && cfg.checkpoint_interval > 0 &&
            (step % cfg.checkpoint_interval == 0 || step == cfg.steps)) {
            student.save(progress_model, "{\"stage\": \"" + stage_tag + "\"}");
            save_opt_state(progress_opt, student, step);
        }
    }
}

void rl_stage(model::TinyDecoder& student, const model::TinyDecoder* reference,
              const Stage3Config& cfg, const taskgen::Dataset& data, const EvalConfig& eval,
              const std::string& metrics_path, std::uint64_t seed,
              const std::string& progress_model, const std::string& progress_opt) {
    if (cfg.objective != "grpo") throw ConfigError("rl_stage: objective must be grpo");
    cfg.grpo.validate();

    objectives::OptimizerConfig opt;
    opt.peak_lr = cfg.peak_lr;
    opt.warmup_steps = std::min(cfg.warmup, cfg.steps);
    opt.total_steps = cfg.steps;
    opt.global_batch = cfg.grpo.batch_prompts * cfg.grpo.group_size;

    std::size_t start_step = 0;
    if (!progress_model.empty() && fs::exists(progress_model) && fs::exists(progress_opt)) {
        student = model::TinyDecoder::load(progress_model);
        start_step = load_opt_state(progress_opt, student);
    }

    const double t0 = now_s();
    for (std::size_t step = start_step + 1; step <= cfg.steps; ++step) {
        std::vector<taskgen::Example> prompt_ex =
            pick_batch(data.train, cfg.grpo.batch_prompts, mix_seed({seed, 0x726cULL}), step);
        std::vector<std::vector<std::size_t>> prompts;
        std::vector<long long> answers;
        for (const auto& ex : prompt_ex) {
            prompts.push_back(ex.prompt_ids());
            answers.push_back(ex.answer);
        }
        objectives::Verifier verifier = [&](std::size_t pi, const std::vector<std::size_t>& ids) {
            return objectives::verify_answer(ids, answers.at(pi));
        };
        std::uint64_t rollout_seed = mix_seed({seed, 0x726f6c6cULL, step});
        objectives::GrpoMetrics gm = objectives::grpo_step(student, reference, prompts, cfg.grpo,
                                                           opt, step, verifier, rollout_seed);

        evalrun::MetricRecord rec;
        rec.step = step;
        rec.stage = "rl";
        rec.loss = gm.loss;
        rec.reward_mean = gm.reward_mean;
        rec.mean_length = gm.mean_response_length;
        rec.entropy = gm.mean_token_entropy;
        rec.lr = objectives::lr_at(opt, step);
        rec.wall_clock_s = now_s() - t0;
        if (cfg.eval_interval > 0 && (step % cfg.eval_interval == 0 || step == cfg.steps)) {
            auto report = evalrun::evaluate(student, eval_subset(data.eval, 64), eval.sampler,
                                            {eval.seeds.front()});
            rec.eval_accuracy = report.accuracy;
        }
        if (!metrics_path.empty()) evalrun::log_metrics(metrics_path, rec);

        if (!progress_model.empty() && cfg.checkpoint_interval > 0 &&
            (step % cfg.checkpoint_interval == 0 || step == cfg.steps)) {
            student.save(progress_model, "{\"stage\": \"rl\"}");
            save_opt_state(progress_opt, student, step);
        }
    }
}

int select_bit_width(const model::TinyDecoder& teacher, double teacher_accuracy,
                     const std::vector<taskgen::Example>& eval_set, const EvalConfig& eval,
                     std::size_t group_size, double threshold_frac, const std::string& scheme) {
    InitConfig rtn_init;
    rtn_init.method = "rtn";
    rtn_init.group_size = group_size;
    rtn_init.scheme = scheme;
    taskgen::ArithTaskConfig dummy;
    const std::vector<taskgen::Example> probe = eval_subset(eval_set, 64);
    for (int bits : {2, 3, 4}) {
        model::TinyDecoder q = ptq_init(teacher, rtn_init, bits, dummy, 0);
        auto report = evalrun::evaluate(q, probe, eval.sampler, {eval.seeds.front()});
        if (report.accuracy < threshold_frac * teacher_accuracy) return bits;
    }
    return 4;
}

// ---------------------------------------------------------------------------
// orchestration

namespace {

struct Executor {
    WorkflowConfig cfg;
    RunManifest man;
    bool resume_mode = false;
    taskgen::Dataset data;

    StageRecord& record(const std::string& name) {
        for (auto& s : man.stages)
            if (s.name == name) return s;
        StageRecord r;
        r.name = name;
        man.stages.push_back(r);
        return man.stages.back();
    }

    std::string abspath(const std::string& rel) const {
        return (fs::path(cfg.output_dir) / rel).string();
    }

    // True when the stage may be skipped: marked complete and its output is
    // intact on disk. Tampered bytes raise; a deleted output forces a re-run.
    bool skip_complete(const StageRecord& r) const {
        if (!resume_mode || r.status != "complete") return false;
        std::string p = abspath(r.output);
        if (!fs::exists(p)) return false;
        if (hex64(packing::file_digest(p)) != r.output_digest)
            throw IntegrityError("resume: digest mismatch for stage '" + r.name + "' output " +
                                 r.output);
        return true;
    }

    bool has_eval(const std::string& stage) const {
        for (const auto& e : man.evals)
            if (e.stage == stage) return true;
        return false;
    }

    void eval_stage(const std::string& stage, std::uint64_t run_seed,
                    const model::TinyDecoder& m) {
        if (resume_mode && has_eval(stage)) return;
        StageEval ev;
        ev.stage = stage;
        ev.run_seed = run_seed;
        ev.report = evalrun::evaluate(m, eval_subset(data.eval, cfg.eval.n_problems),
                                      cfg.eval.sampler, cfg.eval.seeds);
        // drop a stale eval for this stage (e.g. the stage was re-run)
        std::erase_if(man.evals, [&](const StageEval& e) { return e.stage == stage; });
        man.evals.push_back(std::move(ev));
        man.save();
    }

    void complete(StageRecord& r, const std::string& output_rel, double wall,
                  std::vector<std::string> input_digests) {
        r.output = output_rel;
        r.output_digest = hex64(packing::file_digest(abspath(output_rel)));
        r.input_digests = std::move(input_digests);
        r.wall_clock_s = wall;
        r.status = "complete";
        r.error.clear();
        man.save();
    }

    model::TinyDecoder stage_teacher() {
        StageRecord& r = record("teacher");
        std::string out_rel = "teacher.rqat";
        if (skip_complete(r)) return model::TinyDecoder::load(abspath(out_rel));
        r.status = "running";
        r.output = out_rel;
        man.save();
        double t0 = now_s();
        model::TinyDecoder teacher = [&] {
            if (cfg.teacher.mode == "load") {
                if (!fs::exists(cfg.teacher.path))
                    throw ConfigError("teacher checkpoint not found: " + cfg.teacher.path);
                return model::TinyDecoder::load(cfg.teacher.path);
            }
            return train_teacher(cfg.model, cfg.teacher, data, cfg.eval,
                                 abspath("metrics_teacher.jsonl"), cfg.data.seed);
        }();
        teacher.save(abspath(out_rel), "{\"stage\": \"teacher\"}");
        std::vector<std::string> inputs;
        if (cfg.teacher.mode == "load")
            inputs.push_back(hex64(packing::file_digest(cfg.teacher.path)));
        complete(r, out_rel, now_s() - t0, std::move(inputs));
        return teacher;
    }

    RunManifest execute() {
        fs::create_directories(cfg.output_dir);
        man.config = cfg;
        man.save();

        // dataset is derived deterministically from the config
        data = taskgen::generate(cfg.data);
        fs::create_directories(abspath("data"));
        if (!fs::exists(abspath("data/train.jsonl"))) {
            taskgen::save_dataset_jsonl(abspath("data/train.jsonl"), data.train);
            taskgen::save_dataset_jsonl(abspath("data/eval.jsonl"), data.eval);
            taskgen::save_dataset_jsonl(abspath("data/calib.jsonl"), data.calib);
        }

        model::TinyDecoder teacher = stage_teacher();
        if (!(resume_mode && has_eval("teacher"))) {
            eval_stage("teacher", 0, teacher);
        }
        man.teacher_accuracy = 0.0;
        for (const auto& e : man.evals)
            if (e.stage == "teacher") man.teacher_accuracy = e.report.accuracy;

        if (man.bits == 0) {
            man.bits = cfg.init.bits != 0
                           ? cfg.init.bits
                           : select_bit_width(teacher, man.teacher_accuracy, data.eval, cfg.eval,
                                              cfg.init.group_size, 0.5, cfg.init.scheme);
            man.save();
        }

        double final_total = 0.0;
        for (std::uint64_t ws : cfg.seeds) {
            std::string sd = "seed" + std::to_string(ws);
            fs::create_directories(abspath(sd));
            std::string last_rel = "teacher.rqat";
            std::string last_stage_tag = "teacher";

            // stage 1: PTQ init
            {
                StageRecord& r = record(sd + "/ptq");
                std::string out_rel = sd + "/init.rqat";
                if (!skip_complete(r)) {
                    r.status = "running";
                    r.output = out_rel;
                    man.save();
                    double t0 = now_s();
                    model::TinyDecoder student =
                        ptq_init(teacher, cfg.init, man.bits, cfg.data, ws);
                    student.save(abspath(out_rel), "{\"stage\": \"ptq\"}");
                    complete(r, out_rel, now_s() - t0,
                             {hex64(packing::file_digest(abspath(last_rel)))});
                }
                model::TinyDecoder student = model::TinyDecoder::load(abspath(out_rel));
                eval_stage(sd + "/ptq", ws, student);
                last_rel = out_rel;
                last_stage_tag = "ptq";
            }

            // stage 2: KD / SFT recovery
            if (cfg.stage2.objective != "none") {
                StageRecord& r = record(sd + "/stage2");
                std::string out_rel = sd + "/stage2.rqat";
                if (!skip_complete(r)) {
                    r.status = "running";
                    r.output = out_rel;
                    man.save();
                    double t0 = now_s();
                    std::string pm = abspath(sd + "/stage2_progress.rqat");
                    std::string po = abspath(sd + "/stage2_opt.rqat");
                    if (!(resume_mode && fs::exists(pm) && fs::exists(po))) {
                        fs::remove(pm);
                        fs::remove(po);
                    }
                    model::TinyDecoder student = model::TinyDecoder::load(abspath(last_rel));
                    recovery_stage(student, teacher, cfg.stage2, data, cfg.eval,
                                   abspath(sd + "/metrics_stage2.jsonl"), ws, pm, po);
                    student.save(abspath(out_rel), "{\"stage\": \"" + cfg.stage2.objective + "\"}");
                    fs::remove(pm);
                    fs::remove(po);
                    complete(r, out_rel, now_s() - t0,
                             {hex64(packing::file_digest(abspath(last_rel)))});
                }
                model::TinyDecoder student = model::TinyDecoder::load(abspath(out_rel));
                eval_stage(sd + "/stage2", ws, student);
                last_rel = out_rel;
                last_stage_tag = cfg.stage2.objective;
            }

            // stage 3: GRPO
            if (cfg.stage3.objective != "none") {
                StageRecord& r = record(sd + "/stage3");
                std::string out_rel = sd + "/stage3.rqat";
                if (!skip_complete(r)) {
                    r.status = "running";
                    r.output = out_rel;
                    man.save();
                    double t0 = now_s();
                    std::string pm = abspath(sd + "/stage3_progress.rqat");
                    std::string po = abspath(sd + "/stage3_opt.rqat");
                    if (!(resume_mode && fs::exists(pm) && fs::exists(po))) {
                        fs::remove(pm);
                        fs::remove(po);
                    }
                    model::TinyDecoder student = model::TinyDecoder::load(abspath(last_rel));
                    std::unique_ptr<model::TinyDecoder> reference;
                    if (cfg.stage3.grpo.kl_coef > 0.0)
                        reference = std::make_unique<model::TinyDecoder>(
                            model::TinyDecoder::load(abspath(last_rel)));
                    rl_stage(student, reference.get(), cfg.stage3, data, cfg.eval,
                             abspath(sd + "/metrics_stage3.jsonl"), ws, pm, po);
                    student.save(abspath(out_rel), "{\"stage\": \"rl\"}");
                    fs::remove(pm);
                    fs::remove(po);
                    complete(r, out_rel, now_s() - t0,
                             {hex64(packing::file_digest(abspath(last_rel)))});
                }
                model::TinyDecoder student = model::TinyDecoder::load(abspath(out_rel));
                eval_stage(sd + "/stage3", ws, student);
                last_rel = out_rel;
                last_stage_tag = "rl";
            }

            for (const auto& e : man.evals) {
                std::string final_name =
                    sd + (cfg.stage3.objective != "none"
                              ? "/stage3"
                              : cfg.stage2.objective != "none" ? "/stage2" : "/ptq");
                if (e.stage == final_name) final_total += e.report.accuracy;
            }
            (void)last_stage_tag;
        }
        man.mean_final_accuracy = final_total / static_cast<double>(cfg.seeds.size());
        man.save();
        return man;
    }
};

}  // namespace

RunManifest run(const WorkflowConfig& config) {
    config.validate();
    Executor ex;
    ex.cfg = config;
    ex.cfg.model.vocab_size = taskgen::Tokenizer::vocab_size();
    ex.resume_mode = false;
    ex.man.bits = 0;
    try {
        return ex.execute();
    } catch (...) {
        for (auto& s : ex.man.stages)
            if (s.status == "running") s.status = "failed";
        try {
            ex.man.save();
        } catch (...) {
        }
        throw;
    }
}

RunManifest resume(const std::string& manifest_path) {
    RunManifest loaded = RunManifest::load(manifest_path);
    loaded.config.validate();
    Executor ex;
    ex.cfg = loaded.config;
    ex.man = loaded;
    ex.resume_mode = true;
    for (auto& s : ex.man.stages)
        if (s.status == "failed") s.status = "pending";
    try {
        return ex.execute();
    } catch (...) {
        for (auto& s : ex.man.stages)
            if (s.status == "running") s.status = "failed";
        try {
            ex.man.save();
        } catch (...) {
        }
        throw;
    }
}

// ---------------------------------------------------------------------------
// ablation matrix

MatrixResult matrix(const WorkflowConfig& base) {
    base.validate();
    fs::create_directories(base.output_dir);

    // one shared teacher and bit-width for all cells
    WorkflowConfig probe = base;
    probe.stage2.objective = "none";
    probe.stage3.objective = "none";
    probe.seeds = {base.seeds.front()};
    probe.output_dir = (fs::path(base.output_dir) / "shared").string();
    RunManifest shared = run(probe);
    std::string teacher_path = (fs::path(probe.output_dir) / "teacher.rqat").string();

    MatrixResult result;
    double best = -1.0;
    for (const char* method : {"rtn", "gptq"}) {
        for (const char* obj2 : {"sft", "kd"}) {
            for (const char* obj3 : {"none", "grpo"}) {
                std::string name = std::string(method) + "_" + obj2 +
                                   (std::string(obj3) == "grpo" ? "_grpo" : "_nogrpo");
                WorkflowConfig cell = base;
                cell.teacher.mode = "load";
                cell.teacher.path = teacher_path;
                cell.init.method = method;
                cell.init.bits = shared.bits;
                cell.stage2.objective = obj2;
                cell.stage3.objective = obj3;
                cell.output_dir = (fs::path(base.output_dir) / ("cell_" + name)).string();
                RunManifest m = run(cell);
                MatrixCell mc;
                mc.name = name;
                mc.manifest = m.path();
                mc.mean_accuracy = m.mean_final_accuracy;
                if (mc.mean_accuracy > best) {
                    best = mc.mean_accuracy;
                    result.best_cell = name;
                }
                result.cells.push_back(std::move(mc));
            }
        }
    }

    std::ostringstream table;
    table << "cell                    mean_accuracy\n";
    json jt = json::array();
    for (const auto& c : result.cells) {
        table << c.name;
        for (std::size_t i = c.name.size(); i < 24; ++i) table << ' ';
        table << c.mean_accuracy << "\n";
        jt.push_back({{"cell", c.name}, {"mean_accuracy", c.mean_accuracy},
                      {"manifest", c.manifest}});
    }
    table << "best: " << result.best_cell << "\n";
    result.table_path = (fs::path(base.output_dir) / "matrix_table.txt").string();
    atomic_write(result.table_path, table.str());
    atomic_write((fs::path(base.output_dir) / "matrix.json").string(),
                 json({{"cells", jt}, {"best_cell", result.best_cell}}).dump(2) + "\n");
    return result;
}

}  // namespace rqat::workflow
