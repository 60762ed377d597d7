#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rqat/model.hpp"
#include "rqat/taskgen.hpp"

namespace rqat::evalrun {

struct SeedResult {
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    double mean_response_length = 0.0;
    double mean_token_entropy = 0.0;
};

struct EvalReport {
    double accuracy = 0.0;
    double mean_response_length = 0.0;
    double mean_token_entropy = 0.0;
    std::size_t n_problems = 0;
    std::vector<SeedResult> per_seed;
    std::vector<std::uint64_t> seeds;

    std::string to_json() const;
};

// One sampled response per problem per seed (pass@1 protocol); reported
// means are exact arithmetic means of the per-seed values.
EvalReport evaluate(const model::TinyDecoder& m, const std::vector<taskgen::Example>& eval_set,
                    const model::SamplerConfig& sampler, const std::vector<std::uint64_t>& seeds,
                    std::size_t samples_per_problem = 1);

struct MetricRecord {
    std::size_t step = 0;
    std::string stage;  // teacher | ptq | sft | kd | rl | eval
    std::optional<double> loss, reward_mean, eval_accuracy, mean_length, entropy, lr, wall_clock_s;
};

// Appends one line-delimited record; absent metrics are omitted from the line.
void log_metrics(const std::string& path, const MetricRecord& record);

// Replays a metrics file; malformed line -> FormatError naming the line.
std::vector<MetricRecord> load_metrics(const std::string& path);

// Line chart (x = step, y = key value), one series per (file, key), written
// as SVG; legend and axis labels derived from file stems and keys.
void plot(const std::vector<std::string>& metric_files, const std::vector<std::string>& keys,
          const std::string& out_path);

}  // namespace rqat::evalrun
