#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rqat/evalrun.hpp"
#include "rqat/model.hpp"
#include "rqat/objectives.hpp"
#include "rqat/packing.hpp"
#include "rqat/ptq.hpp"
#include "rqat/taskgen.hpp"
#include "rqat/workflow.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rqat;

namespace {

// every artifact-producing subcommand echoes its resolved options next to
// its output so runs are replayable
void echo_args(const std::string& out, const json& resolved) {
    if (out.empty()) return;
    std::ofstream f(out + ".args.json", std::ios::trunc);
    f << resolved.dump(2) << "\n";
}

taskgen::Dataset load_or_generate(const std::string& data_dir,
                                  const taskgen::ArithTaskConfig& cfg) {
    taskgen::Dataset d;
    if (!data_dir.empty()) {
        d.train = taskgen::load_dataset_jsonl((fs::path(data_dir) / "train.jsonl").string());
        d.eval = taskgen::load_dataset_jsonl((fs::path(data_dir) / "eval.jsonl").string());
        std::string calib = (fs::path(data_dir) / "calib.jsonl").string();
        if (fs::exists(calib)) d.calib = taskgen::load_dataset_jsonl(calib);
        return d;
    }
    return taskgen::generate(cfg);
}

std::string checkpoint_stage(const std::string& path) {
    std::string extra;
    model::TinyDecoder::load(path, &extra);
    return json::parse(extra).value("stage", "");
}

int run_cli(int argc, char** argv) {
    CLI::App app{"rqat: desk-scale reasoning-aware quantization workbench"};
    app.require_subcommand(1);

    // ---- gen-data ----------------------------------------------------------
    auto* gen = app.add_subcommand("gen-data", "Generate the arithmetic task dataset");
    taskgen::ArithTaskConfig dcfg;
    std::string gen_out = "data";
    gen->add_option("--n-operands", dcfg.n_operands);
    gen->add_option("--lo", dcfg.lo);
    gen->add_option("--hi", dcfg.hi);
    gen->add_option("--operators", dcfg.operators);
    gen->add_option("--n-train", dcfg.n_train);
    gen->add_option("--n-eval", dcfg.n_eval);
    gen->add_option("--n-calib", dcfg.n_calib);
    gen->add_option("--seed", dcfg.seed);
    gen->add_option("--out", gen_out);
    gen->callback([&] {
        taskgen::Dataset d = taskgen::generate(dcfg);
        fs::create_directories(gen_out);
        taskgen::save_dataset_jsonl((fs::path(gen_out) / "train.jsonl").string(), d.train);
        taskgen::save_dataset_jsonl((fs::path(gen_out) / "eval.jsonl").string(), d.eval);
        taskgen::save_dataset_jsonl((fs::path(gen_out) / "calib.jsonl").string(), d.calib);
        echo_args((fs::path(gen_out) / "dataset").string(),
                  json::parse(workflow::WorkflowConfig{.data = dcfg}.to_json())["data"]);
        std::cout << "wrote " << d.train.size() << "/" << d.eval.size() << "/" << d.calib.size()
                  << " train/eval/calib examples to " << gen_out << "\n";
    });

    // ---- train-teacher -----------------------------------------------------
    auto* tt = app.add_subcommand("train-teacher", "Train the full-precision teacher");
    workflow::WorkflowConfig tt_cfg;
    std::string tt_data, tt_out = "teacher.rqat", tt_metrics;
    std::uint64_t tt_seed = 1;
    tt->add_option("--data", tt_data, "dataset directory (default: generate from --seed)");
    tt->add_option("--d-model", tt_cfg.model.d_model);
    tt->add_option("--n-layers", tt_cfg.model.n_layers);
    tt->add_option("--n-heads", tt_cfg.model.n_heads);
    tt->add_option("--d-ff", tt_cfg.model.d_ff);
    tt->add_option("--max-seq-len", tt_cfg.model.max_seq_len);
    tt->add_option("--steps", tt_cfg.teacher.steps);
    tt->add_option("--batch", tt_cfg.teacher.batch);
    tt->add_option("--lr", tt_cfg.teacher.peak_lr);
    tt->add_option("--warmup", tt_cfg.teacher.warmup);
    tt->add_option("--target-accuracy", tt_cfg.teacher.target_accuracy);
    tt->add_option("--seed", tt_seed);
    tt->add_option("--out", tt_out);
    tt->add_option("--metrics", tt_metrics);
    tt->callback([&] {
        tt_cfg.model.vocab_size = taskgen::Tokenizer::vocab_size();
        tt_cfg.data.seed = tt_seed;
        taskgen::Dataset d = load_or_generate(tt_data, tt_cfg.data);
        model::TinyDecoder m = workflow::train_teacher(tt_cfg.model, tt_cfg.teacher, d,
                                                       tt_cfg.eval, tt_metrics, tt_seed);
        m.save(tt_out, "{\"stage\": \"teacher\"}");
        echo_args(tt_out, json::parse(tt_cfg.to_json()));
        std::cout << "saved teacher to " << tt_out << "\n";
    });

    // ---- calibrate ---------------------------------------------------------
    auto* cal = app.add_subcommand("calibrate", "Collect layer Hessian statistics");
    std::string cal_model, cal_kind = "in_domain", cal_out = "hessians.rqat";
    std::size_t cal_tokens = 2048;
    std::uint64_t cal_seed = 1;
    cal->add_option("--model", cal_model)->required();
    cal->add_option("--kind", cal_kind, "in_domain|out_of_domain");
    cal->add_option("--tokens", cal_tokens);
    cal->add_option("--seed", cal_seed);
    cal->add_option("--out", cal_out);
    cal->callback([&] {
        if (cal_kind != "in_domain" && cal_kind != "out_of_domain")
            throw ConfigError("calibrate: --kind must be in_domain|out_of_domain");
        model::TinyDecoder m = model::TinyDecoder::load(cal_model);
        taskgen::ArithTaskConfig dcfg2;
        dcfg2.seed = cal_seed;
        auto seqs = taskgen::make_calibration(cal_kind == "in_domain"
                                                  ? taskgen::CalibKind::InDomain
                                                  : taskgen::CalibKind::OutOfDomain,
                                              cal_tokens, cal_seed, dcfg2);
        auto hs = ptq::calibrate_model(m, seqs);
        packing::TensorMap t;
        for (const auto& [name, acc] : hs) {
            t["h/" + name] = packing::DenseTensor{{acc.dim, acc.dim}, acc.h};
            t["n/" + name] = packing::DenseTensor{{1}, {static_cast<double>(acc.n_samples)}};
        }
        packing::save_checkpoint(cal_out, t, json({{"kind", "hessians"}}).dump());
        echo_args(cal_out, {{"model", cal_model}, {"kind", cal_kind}, {"tokens", cal_tokens},
                            {"seed", cal_seed}});
        std::cout << "saved " << hs.size() << " layer Hessians to " << cal_out << "\n";
    });

    // ---- ptq ---------------------------------------------------------------
    auto* pq = app.add_subcommand("ptq", "Quantize a model with RTN or GPTQ");
    std::string pq_model, pq_method = "gptq", pq_calib, pq_out = "init.rqat";
    std::string pq_scheme = "asymmetric";
    int pq_bits = 3;
    std::size_t pq_group = 32;
    bool pq_act_order = false;
    pq->add_option("--model", pq_model)->required();
    pq->add_option("--method", pq_method, "rtn|gptq");
    pq->add_option("--bits", pq_bits);
    pq->add_option("--group", pq_group);
    pq->add_option("--calib", pq_calib, "hessian checkpoint (required for gptq)");
    pq->add_option("--scheme", pq_scheme, "asymmetric|symmetric");
    pq->add_flag("--act-order", pq_act_order);
    pq->add_option("--out", pq_out);
    pq->callback([&] {
        if (pq_method != "rtn" && pq_method != "gptq")
            throw ConfigError("ptq: --method must be rtn|gptq");
        if (pq_method == "gptq" && pq_calib.empty())
            throw ConfigError("ptq: --method gptq requires --calib");
        model::TinyDecoder m = model::TinyDecoder::load(pq_model);
        if (pq_scheme != "asymmetric" && pq_scheme != "symmetric")
            throw ConfigError("ptq: --scheme must be asymmetric|symmetric");
        quant::QuantSpec spec;
        spec.bits = pq_bits;
        spec.group_size = pq_group;
        spec.scheme = pq_scheme == "symmetric" ? quant::Scheme::Symmetric
                                               : quant::Scheme::Asymmetric;
        spec.validate();

        std::map<std::string, ptq::HessianAccumulator> hs;
        if (pq_method == "gptq") {
            packing::TensorMap t = packing::load_checkpoint(pq_calib);
            for (const auto& [name, v] : t) {
                if (name.rfind("h/", 0) != 0) continue;
                const auto& d = std::get<packing::DenseTensor>(v);
                ptq::HessianAccumulator acc(d.shape.at(0));
                acc.h = d.data;
                auto it = t.find("n/" + name.substr(2));
                if (it == t.end()) throw FormatError("ptq: hessian file missing n/" + name.substr(2));
                acc.n_samples = static_cast<std::size_t>(
                    std::get<packing::DenseTensor>(it->second).data.at(0));
                hs.emplace(name.substr(2), std::move(acc));
            }
        }
        for (const std::string& name : m.quantizable_layers()) {
            auto [out_f, in_f] = m.layer_shape(name);
            auto& p = m.params().at(name);
            ptq::PtqResult r;
            if (pq_method == "rtn") {
                r = ptq::rtn(p.value, out_f, in_f, spec);
            } else {
                ptq::GptqOptions opts;
                opts.act_order = pq_act_order;
                auto it = hs.find(name);
                if (it == hs.end()) throw FormatError("ptq: no Hessian for layer " + name);
                r = ptq::gptq(p.value, out_f, in_f, it->second, spec, opts);
            }
            p.value = r.latent;
            m.frozen_params()[name] = r.quantized.params;
        }
        ad::FakeQuantConfig fq;
        fq.spec = spec;
        fq.mode = ad::FakeQuantMode::Frozen;
        m.mutable_config().quant = fq;
        m.mutable_config().validate();
        m.save(pq_out, "{\"stage\": \"ptq\"}");
        echo_args(pq_out, {{"model", pq_model}, {"method", pq_method}, {"bits", pq_bits},
                           {"group", pq_group}, {"scheme", pq_scheme},
                           {"calib", pq_calib}, {"act_order", pq_act_order}});
        std::cout << "saved " << pq_method << " " << pq_bits << "-bit init to " << pq_out << "\n";
    });

    // ---- train (stage-2 recovery) ------------------------------------------
    auto* tr = app.add_subcommand("train", "KD/SFT recovery training of a quantized student");
    workflow::WorkflowConfig tr_cfg;
    std::string tr_init, tr_teacher, tr_data, tr_out = "stage2.rqat", tr_metrics;
    std::uint64_t tr_seed = 1;
    tr->add_option("--objective", tr_cfg.stage2.objective, "sft|kd")->required();
    tr->add_option("--kd-temperature", tr_cfg.stage2.kd_temperature,
                   "distillation temperature (kd only)");
    tr->add_option("--init", tr_init, "PTQ-initialized student checkpoint")->required();
    tr->add_option("--teacher", tr_teacher, "teacher checkpoint (required for kd)");
    tr->add_option("--data", tr_data);
    tr->add_option("--steps", tr_cfg.stage2.steps);
    tr->add_option("--batch", tr_cfg.stage2.batch);
    tr->add_option("--lr", tr_cfg.stage2.peak_lr);
    tr->add_option("--warmup", tr_cfg.stage2.warmup);
    tr->add_option("--seed", tr_seed);
    tr->add_option("--out", tr_out);
    tr->add_option("--metrics", tr_metrics);
    tr->callback([&] {
        if (tr_cfg.stage2.objective == "kd" && tr_teacher.empty())
            throw ConfigError("train: --objective kd requires --teacher");
        model::TinyDecoder student = model::TinyDecoder::load(tr_init);
        model::TinyDecoder teacher = tr_teacher.empty() ? student
                                                        : model::TinyDecoder::load(tr_teacher);
        tr_cfg.data.seed = tr_seed;
        taskgen::Dataset d = load_or_generate(tr_data, tr_cfg.data);
        workflow::recovery_stage(student, teacher, tr_cfg.stage2, d, tr_cfg.eval, tr_metrics,
                                 tr_seed);
        student.save(tr_out, "{\"stage\": \"" + tr_cfg.stage2.objective + "\"}");
        echo_args(tr_out, {{"objective", tr_cfg.stage2.objective}, {"init", tr_init},
                           {"teacher", tr_teacher}, {"steps", tr_cfg.stage2.steps},
                           {"seed", tr_seed}});
        std::cout << "saved " << tr_cfg.stage2.objective << "-recovered student to " << tr_out
                  << "\n";
    });

    // ---- rl ----------------------------------------------------------------
    auto* rl = app.add_subcommand("rl", "GRPO reinforcement stage");
    workflow::WorkflowConfig rl_cfg;
    std::string rl_init, rl_data, rl_out = "stage3.rqat", rl_metrics;
    std::uint64_t rl_seed = 1;
    rl_cfg.stage3.objective = "grpo";
    rl->add_option("--init", rl_init)->required();
    rl->add_option("--data", rl_data);
    rl->add_option("--steps", rl_cfg.stage3.steps);
    rl->add_option("--group-size", rl_cfg.stage3.grpo.group_size);
    rl->add_option("--batch-prompts", rl_cfg.stage3.grpo.batch_prompts);
    rl->add_option("--clip-eps", rl_cfg.stage3.grpo.clip_eps);
    rl->add_option("--kl-coef", rl_cfg.stage3.grpo.kl_coef);
    rl->add_option("--lr", rl_cfg.stage3.peak_lr);
    rl->add_flag("--allow-zero-rl", rl_cfg.stage3.allow_zero_rl);
    rl->add_option("--seed", rl_seed);
    rl->add_option("--out", rl_out);
    rl->add_option("--metrics", rl_metrics);
    rl->callback([&] {
        std::string stage = checkpoint_stage(rl_init);
        if (stage != "sft" && stage != "kd" && stage != "rl" && stage != "teacher" &&
            !rl_cfg.stage3.allow_zero_rl)
            throw ConfigError(
                "rl: '" + rl_init + "' is not a cold-start (KD/SFT-recovered) checkpoint; "
                "RL on a raw quantized init collapses — pass --allow-zero-rl to run the "
                "zero-RL ablation anyway");
        model::TinyDecoder student = model::TinyDecoder::load(rl_init);
        rl_cfg.data.seed = rl_seed;
        taskgen::Dataset d = load_or_generate(rl_data, rl_cfg.data);
        workflow::rl_stage(student, nullptr, rl_cfg.stage3, d, rl_cfg.eval, rl_metrics, rl_seed);
        student.save(rl_out, "{\"stage\": \"rl\"}");
        echo_args(rl_out, {{"init", rl_init}, {"steps", rl_cfg.stage3.steps},
                           {"group_size", rl_cfg.stage3.grpo.group_size},
                           {"allow_zero_rl", rl_cfg.stage3.allow_zero_rl}, {"seed", rl_seed}});
        std::cout << "saved RL-tuned student to " << rl_out << "\n";
    });

    // ---- eval --------------------------------------------------------------
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the task");
    std::string ev_model, ev_data, ev_out;
    std::size_t ev_nseeds = 3, ev_nprob = 0;
    model::SamplerConfig ev_sampler;
    std::uint64_t ev_seed = 1;
    ev->add_option("--model", ev_model)->required();
    ev->add_option("--data", ev_data);
    ev->add_option("--seeds", ev_nseeds, "number of eval seeds");
    ev->add_option("--temperature", ev_sampler.temperature);
    ev->add_option("--top-p", ev_sampler.top_p);
    ev->add_option("--max-new-tokens", ev_sampler.max_new_tokens);
    ev->add_option("--n-problems", ev_nprob);
    ev->add_option("--seed", ev_seed);
    ev->add_option("--out", ev_out, "write the report as a structured record");
    ev->callback([&] {
        model::TinyDecoder m = model::TinyDecoder::load(ev_model);
        taskgen::ArithTaskConfig dcfg2;
        dcfg2.seed = ev_seed;
        taskgen::Dataset d = load_or_generate(ev_data, dcfg2);
        std::vector<taskgen::Example> evalset = d.eval;
        if (ev_nprob != 0 && ev_nprob < evalset.size())
            evalset.resize(ev_nprob);
        std::vector<std::uint64_t> seeds;
        for (std::size_t i = 0; i < ev_nseeds; ++i) seeds.push_back(ev_seed + i);
        evalrun::EvalReport r = evalrun::evaluate(m, evalset, ev_sampler, seeds);
        std::cout << r.to_json() << "\n";
        if (!ev_out.empty()) {
            std::ofstream f(ev_out, std::ios::trunc);
            f << r.to_json() << "\n";
            echo_args(ev_out, {{"model", ev_model}, {"seeds", ev_nseeds},
                               {"temperature", ev_sampler.temperature},
                               {"top_p", ev_sampler.top_p}, {"seed", ev_seed}});
        }
    });

    // ---- run-workflow ------------------------------------------------------
    auto* wf = app.add_subcommand("run-workflow", "Run the 3-stage pipeline from a config file");
    std::string wf_config, wf_resume;
    bool wf_matrix = false;
    wf->add_option("--config", wf_config);
    wf->add_option("--resume", wf_resume, "manifest to resume");
    wf->add_flag("--matrix", wf_matrix, "run the 8-cell ablation matrix");
    wf->callback([&] {
        if (!wf_resume.empty()) {
            workflow::RunManifest m = workflow::resume(wf_resume);
            std::cout << "resumed: mean final accuracy " << m.mean_final_accuracy << "\n";
            return;
        }
        if (wf_config.empty()) throw ConfigError("run-workflow: --config or --resume required");
        workflow::WorkflowConfig cfg = workflow::WorkflowConfig::load_file(wf_config);
        if (wf_matrix) {
            workflow::MatrixResult r = workflow::matrix(cfg);
            std::cout << "matrix complete; best cell: " << r.best_cell << "\n"
                      << "table: " << r.table_path << "\n";
        } else {
            workflow::RunManifest m = workflow::run(cfg);
            std::cout << "workflow complete; mean final accuracy " << m.mean_final_accuracy
                      << "\nmanifest: " << m.path() << "\n";
        }
    });

    // ---- pack --------------------------------------------------------------
    auto* pk = app.add_subcommand("pack", "Bit-pack a frozen-quant checkpoint's weights");
    std::string pk_model, pk_out = "packed.rqat";
    pk->add_option("--model", pk_model)->required();
    pk->add_option("--out", pk_out);
    pk->callback([&] {
        model::TinyDecoder m = model::TinyDecoder::load(pk_model);
        if (!m.config().quant || m.config().quant->mode != ad::FakeQuantMode::Frozen)
            throw DomainError("pack: checkpoint has no frozen quantization config");
        const quant::QuantSpec& spec = m.config().quant->spec;
        packing::TensorMap t;
        for (const auto& [name, p] : m.params()) {
            auto fp = m.frozen_params().find(name);
            if (fp == m.frozen_params().end()) {
                t["param/" + name] = packing::DenseTensor{p.shape, p.value};
                continue;
            }
            quant::QuantizedTensor qt;
            qt.shape = p.shape;
            qt.spec = spec;
            qt.params = fp->second;
            const std::size_t in_f = p.shape.at(1);
            const std::size_t gsz = spec.group_size == 0 ? in_f : spec.group_size;
            const std::size_t gpr = spec.groups_per_row(in_f);
            qt.codes.resize(p.value.size());
            for (std::size_t r = 0; r < p.shape.at(0); ++r)
                for (std::size_t g = 0; g < gpr; ++g) {
                    const auto& qp = qt.params.at(r * gpr + g);
                    for (std::size_t c = g * gsz; c < (g + 1) * gsz && c < in_f; ++c)
                        qt.codes[r * in_f + c] = quant::quantize_one(p.value[r * in_f + c], qp);
                }
            qt.validate();
            t["qweight/" + name] = std::move(qt);
        }
        packing::save_checkpoint(pk_out, t, json({{"kind", "packed-model"},
                                                  {"bits", spec.bits},
                                                  {"group_size", spec.group_size}}).dump());
        echo_args(pk_out, {{"model", pk_model}});
        std::cout << "packed checkpoint written to " << pk_out << "\n";
    });

    // ---- inspect -----------------------------------------------------------
    auto* in = app.add_subcommand("inspect", "Describe a checkpoint's manifest");
    std::string in_path;
    in->add_option("path", in_path)->required();
    in->callback([&] { std::cout << packing::describe_checkpoint(in_path); });

    // ---- plot --------------------------------------------------------------
    auto* pl = app.add_subcommand("plot", "Render metric curves to SVG");
    std::vector<std::string> pl_files, pl_keys;
    std::string pl_out = "curves.svg";
    pl->add_option("--files", pl_files)->required();
    pl->add_option("--keys", pl_keys)->required();
    pl->add_option("--out", pl_out);
    pl->callback([&] {
        evalrun::plot(pl_files, pl_keys, pl_out);
        std::cout << "wrote " << pl_out << "\n";
    });

    CLI11_PARSE(app, argc, argv);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const DomainError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const IntegrityError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
