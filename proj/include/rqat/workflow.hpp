#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rqat/evalrun.hpp"
#include "rqat/model.hpp"
#include "rqat/objectives.hpp"
#include "rqat/ptq.hpp"
#include "rqat/taskgen.hpp"

namespace rqat::workflow {

inline constexpr const char* kCodeVersion = "rqat-core-1";

struct TeacherConfig {
    std::string mode = "train";  // train | load
    std::string path;            // checkpoint to load when mode == load
    std::size_t steps = 1200;
    std::size_t batch = 16;
    double peak_lr = 1.5e-3;
    std::size_t warmup = 100;
    double target_accuracy = 0.98;  // early stop once reached
    std::size_t eval_interval = 100;
};

struct InitConfig {
    std::string method = "gptq";    // rtn | gptq
    std::string calib = "in_domain";  // in_domain | out_of_domain
    std::string scheme = "asymmetric";  // asymmetric | symmetric
    int bits = 0;                   // 0 -> adaptive over {2,3,4}
    std::size_t group_size = 32;
    bool act_order = false;
    std::size_t calib_tokens = 2048;
};

struct Stage2Config {
    std::string objective = "kd";  // sft | kd | none
    double kd_temperature = 1.0;
    std::size_t steps = 400;
    std::size_t batch = 16;
    double peak_lr = 1e-3;
    std::size_t warmup = 40;
    std::size_t eval_interval = 100;
    std::size_t checkpoint_interval = 100;
};

struct Stage3Config {
    std::string objective = "none";  // grpo | none
    std::size_t steps = 60;
    objectives::GrpoConfig grpo;
    double peak_lr = 4e-4;
    std::size_t warmup = 5;
    bool allow_zero_rl = false;
    std::size_t eval_interval = 20;
    std::size_t checkpoint_interval = 20;
};

struct EvalConfig {
    model::SamplerConfig sampler;          // temperature 0.6 / top_p 0.95 defaults
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::size_t n_problems = 0;            // 0 -> full eval split
};

struct WorkflowConfig {
    model::ModelConfig model;
    taskgen::ArithTaskConfig data;
    TeacherConfig teacher;
    InitConfig init;
    Stage2Config stage2;
    Stage3Config stage3;
    EvalConfig eval;
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::string output_dir = "run";

    void validate() const;
    std::string to_json() const;
    static WorkflowConfig from_json(const std::string& text);
    static WorkflowConfig load_file(const std::string& path);
};

struct StageRecord {
    std::string name;                    // e.g. "teacher", "seed1/ptq"
    std::string status = "pending";      // pending | running | complete | failed
    std::vector<std::string> input_digests;
    std::string output;                  // checkpoint path (relative to output_dir)
    std::string output_digest;
    double wall_clock_s = 0.0;
    std::size_t progress_step = 0;       // last optimizer checkpoint step
    std::string error;
};

struct StageEval {
    std::string stage;
    std::uint64_t run_seed = 0;
    evalrun::EvalReport report;
};

struct RunManifest {
    std::string code_version = kCodeVersion;
    WorkflowConfig config;
    int bits = 0;                        // resolved bit-width
    double teacher_accuracy = 0.0;
    std::vector<StageRecord> stages;
    std::vector<StageEval> evals;
    double mean_final_accuracy = 0.0;    // over workflow seeds, last stage

    std::string path() const;            // <output_dir>/manifest.json
    void save() const;                   // atomic write
    static RunManifest load(const std::string& manifest_path);

    const StageRecord* find(const std::string& name) const;
    std::optional<double> stage_mean_accuracy(const std::string& stage) const;
};

// Executes teacher prep, then per-workflow-seed: PTQ init, stage-2 recovery,
// stage-3 GRPO, with evaluation after every stage. Fresh run: all stages
// execute. See `resume` for continuation semantics.
RunManifest run(const WorkflowConfig& config);

// Continues from the first incomplete stage; completed stage outputs are
// digest-verified (mismatch -> IntegrityError naming the stage) and left
// untouched. A completed run is a no-op.
RunManifest resume(const std::string& manifest_path);

// Smallest N in {2,3,4} whose RTN-quantized teacher scores below
// `threshold_frac` of the teacher's accuracy; 2 when all are degraded,
// 4 when none is.
int select_bit_width(const model::TinyDecoder& teacher, double teacher_accuracy,
                     const std::vector<taskgen::Example>& eval_set, const EvalConfig& eval,
                     std::size_t group_size, double threshold_frac = 0.5,
                     const std::string& scheme = "asymmetric");

// --- stage-level helpers (used by run() and the CLI subcommands) -----------

// Full-precision SFT until target accuracy or step budget; logs metrics.
model::TinyDecoder train_teacher(const model::ModelConfig& mcfg, const TeacherConfig& tcfg,
                                 const taskgen::Dataset& data, const EvalConfig& eval,
                                 const std::string& metrics_path, std::uint64_t seed);

// Latent-initialized frozen-quant student from the teacher (RTN or GPTQ).
model::TinyDecoder ptq_init(const model::TinyDecoder& teacher, const InitConfig& init, int bits,
                            const taskgen::ArithTaskConfig& data_cfg, std::uint64_t seed);

// Stage-2 KD/SFT recovery in place. `progress_model`/`progress_opt` are the
// periodic mid-stage checkpoints; training resumes from them when present.
void recovery_stage(model::TinyDecoder& student, const model::TinyDecoder& teacher,
                    const Stage2Config& cfg, const taskgen::Dataset& data,
                    const EvalConfig& eval, const std::string& metrics_path, std::uint64_t seed,
                    const std::string& progress_model = "", const std::string& progress_opt = "");

// Stage-3 GRPO in place; same mid-stage checkpoint contract.
void rl_stage(model::TinyDecoder& student, const model::TinyDecoder* reference,
              const Stage3Config& cfg, const taskgen::Dataset& data, const EvalConfig& eval,
              const std::string& metrics_path, std::uint64_t seed,
              const std::string& progress_model = "", const std::string& progress_opt = "");

// Adam state + step counter persistence for mid-stage resume.
void save_opt_state(const std::string& path, const model::TinyDecoder& m, std::size_t step);
std::size_t load_opt_state(const std::string& path, model::TinyDecoder& m);

struct MatrixCell {
    std::string name;       // e.g. "gptq_kd_grpo"
    std::string manifest;   // manifest path
    double mean_accuracy = 0.0;
};

struct MatrixResult {
    std::vector<MatrixCell> cells;  // 8 cells, fixed order
    std::string best_cell;
    std::string table_path;         // consolidated table file
};

// {rtn,gptq} x {sft,kd} x {+-grpo}: one shared teacher, eight pipelines in
// <output_dir>/cell_<name>/, one consolidated table.
MatrixResult matrix(const WorkflowConfig& base);

}  // namespace rqat::workflow
