#include "rqat/evalrun.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "rqat/objectives.hpp"

namespace rqat::evalrun {

using nlohmann::json;

std::string EvalReport::to_json() const {
    json j;
    j["accuracy"] = accuracy;
    j["mean_response_length"] = mean_response_length;
    j["mean_token_entropy"] = mean_token_entropy;
    j["n_problems"] = n_problems;
    j["seeds"] = seeds;
    j["per_seed"] = json::array();
    for (const auto& s : per_seed) {
        j["per_seed"].push_back({{"seed", s.seed},
                                 {"accuracy", s.accuracy},
                                 {"mean_response_length", s.mean_response_length},
                                 {"mean_token_entropy", s.mean_token_entropy}});
    }
    return j.dump();
}

EvalReport evaluate(const model::TinyDecoder& m, const std::vector<taskgen::Example>& eval_set,
                    const model::SamplerConfig& sampler, const std::vector<std::uint64_t>& seeds,
                    std::size_t samples_per_problem) {
    if (eval_set.empty()) throw DomainError("evaluate: empty eval set");
    if (seeds.empty()) throw DomainError("evaluate: empty seed list");
    if (samples_per_problem == 0) throw ConfigError("evaluate: samples_per_problem must be > 0");

    model::InferenceSession session(m);
    EvalReport report;
    report.n_problems = eval_set.size();
    report.seeds = seeds;

    for (std::uint64_t seed : seeds) {
        SeedResult sr;
        sr.seed = seed;
        double correct = 0.0, len_total = 0.0, ent_total = 0.0;
        std::size_t n_samples = 0;
        for (std::size_t i = 0; i < eval_set.size(); ++i) {
            const auto& ex = eval_set[i];
            std::vector<std::size_t> prompt = ex.prompt_ids();
            double best = 0.0;
            for (std::size_t k = 0; k < samples_per_problem; ++k) {
                model::SamplerConfig sc = sampler;
                std::uint64_t mix[3] = {seed, static_cast<std::uint64_t>(i),
                                        static_cast<std::uint64_t>(k)};
                sc.seed = fnv1a64(mix, sizeof(mix));
                model::SampleResult s =
                    model::sample(session, prompt, sc, taskgen::Tokenizer::kEos);
                best = std::max(best, objectives::verify_answer(s.ids, ex.answer));
                len_total += static_cast<double>(s.ids.size());
                double ent = 0.0;
                for (double e : s.entropies) ent += e;
                if (!s.entropies.empty()) ent /= static_cast<double>(s.entropies.size());
                ent_total += ent;
                ++n_samples;
            }
            correct += best;
        }
        sr.accuracy = correct / static_cast<double>(eval_set.size());
        sr.mean_response_length = len_total / static_cast<double>(n_samples);
        sr.mean_token_entropy = ent_total / static_cast<double>(n_samples);
        report.per_seed.push_back(sr);
    }

    const double n = static_cast<double>(report.per_seed.size());
    for (const auto& s : report.per_seed) {
        report.accuracy += s.accuracy / n;
        report.mean_response_length += s.mean_response_length / n;
        report.mean_token_entropy += s.mean_token_entropy / n;
    }
    return report;
}

namespace {

const std::vector<std::string> kStages = {"teacher", "ptq", "sft", "kd", "rl", "eval"};

void put_opt(json& j, const char* key, const std::optional<double>& v) {
    if (v) j[key] = *v;
}

std::optional<double> get_opt(const json& j, const char* key) {
    if (!j.contains(key)) return std::nullopt;
    if (!j[key].is_number()) throw FormatError(std::string("metric field not numeric: ") + key);
    return j[key].get<double>();
}

}  // namespace

void log_metrics(const std::string& path, const MetricRecord& record) {
    if (std::find(kStages.begin(), kStages.end(), record.stage) == kStages.end())
        throw DomainError("log_metrics: unknown stage '" + record.stage + "'");
    json j;
    j["step"] = record.step;
    j["stage"] = record.stage;
    put_opt(j, "loss", record.loss);
    put_opt(j, "reward_mean", record.reward_mean);
    put_opt(j, "eval_accuracy", record.eval_accuracy);
    put_opt(j, "mean_length", record.mean_length);
    put_opt(j, "entropy", record.entropy);
    put_opt(j, "lr", record.lr);
    put_opt(j, "wall_clock_s", record.wall_clock_s);
    std::ofstream out(path, std::ios::app);
    if (!out) throw FormatError("log_metrics: cannot open " + path);
    out << j.dump() << "\n";
}

std::vector<MetricRecord> load_metrics(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("load_metrics: cannot open " + path);
    std::vector<MetricRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": parse error: " + e.what());
        }
        try {
            MetricRecord r;
            r.step = j.at("step").get<std::size_t>();
            r.stage = j.at("stage").get<std::string>();
            r.loss = get_opt(j, "loss");
            r.reward_mean = get_opt(j, "reward_mean");
            r.eval_accuracy = get_opt(j, "eval_accuracy");
            r.mean_length = get_opt(j, "mean_length");
            r.entropy = get_opt(j, "entropy");
            r.lr = get_opt(j, "lr");
            r.wall_clock_s = get_opt(j, "wall_clock_s");
            out.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": bad record: " + e.what());
        }
    }
    return out;
}

namespace {

std::optional<double> record_key(const MetricRecord& r, const std::string& key) {
    if (key == "loss") return r.loss;
    if (key == "reward_mean") return r.reward_mean;
    if (key == "eval_accuracy") return r.eval_accuracy;
    if (key == "mean_length") return r.mean_length;
    if (key == "entropy") return r.entropy;
    if (key == "lr") return r.lr;
    if (key == "wall_clock_s") return r.wall_clock_s;
    throw ConfigError("plot: unknown metric key '" + key + "'");
}

struct Series {
    std::string label;
    std::vector<std::pair<double, double>> points;  // (step, value)
};

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                          "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

}  // namespace

void plot(const std::vector<std::string>& metric_files, const std::vector<std::string>& keys,
          const std::string& out_path) {
    if (metric_files.empty()) throw ConfigError("plot: no metric files");
    if (keys.empty()) throw ConfigError("plot: no metric keys");

    std::vector<Series> series;
    for (const auto& file : metric_files) {
        std::vector<MetricRecord> records = load_metrics(file);
        if (records.empty()) throw FormatError("plot: no records in " + file);
        std::string stem = std::filesystem::path(file).stem().string();
        for (const auto& key : keys) {
            Series s;
            s.label = metric_files.size() > 1 || keys.size() > 1 ? stem + ":" + key : stem;
            for (const auto& r : records) {
                auto v = record_key(r, key);
                if (v) s.points.emplace_back(static_cast<double>(r.step), *v);
            }
            if (!s.points.empty()) series.push_back(std::move(s));
        }
    }
    if (series.empty()) throw FormatError("plot: no records carry the requested keys");

    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (auto [x, y] : s.points) {
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    if (xmax == xmin) xmax = xmin + 1.0;
    if (ymax == ymin) {
        ymax += 0.5;
        ymin -= 0.5;
    }
    double ypad = 0.05 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;

    const double W = 720, H = 440, ml = 70, mr = 160, mt = 30, mb = 50;
    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (W - ml - mr); };
    auto py = [&](double y) { return H - mb - (y - ymin) / (ymax - ymin) * (H - mt - mb); };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    svg << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    // axes
    svg << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\""
        << H - mb << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb
        << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        double fx = xmin + (xmax - xmin) * i / 5.0;
        double fy = ymin + (ymax - ymin) * i / 5.0;
        svg << "<text x=\"" << px(fx) << "\" y=\"" << H - mb + 18
            << "\" font-size=\"11\" text-anchor=\"middle\">" << fx << "</text>\n";
        svg << "<text x=\"" << ml - 8 << "\" y=\"" << py(fy) + 4
            << "\" font-size=\"11\" text-anchor=\"end\">" << fy << "</text>\n";
        svg << "<line x1=\"" << ml << "\" y1=\"" << py(fy) << "\" x2=\"" << W - mr << "\" y2=\""
            << py(fy) << "\" stroke=\"#dddddd\"/>\n";
    }
    svg << "<text x=\"" << (ml + W - mr) / 2 << "\" y=\"" << H - 12
        << "\" font-size=\"13\" text-anchor=\"middle\">step</text>\n";
    std::string ylabel;
    for (const auto& k : keys) ylabel += (ylabel.empty() ? "" : ", ") + k;
    svg << "<text x=\"18\" y=\"" << (mt + H - mb) / 2 << "\" font-size=\"13\" "
        << "text-anchor=\"middle\" transform=\"rotate(-90 18 " << (mt + H - mb) / 2 << ")\">"
        << ylabel << "</text>\n";

    for (std::size_t si = 0; si < series.size(); ++si) {
        const char* color = kPalette[si % (sizeof(kPalette) / sizeof(kPalette[0]))];
        svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (auto [x, y] : series[si].points) svg << px(x) << "," << py(y) << " ";
        svg << "\"/>\n";
        for (auto [x, y] : series[si].points)
            svg << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"2\" fill=\"" << color
                << "\"/>\n";
        double ly = mt + 16.0 * static_cast<double>(si);
        svg << "<line x1=\"" << W - mr + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - mr + 30
            << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        svg << "<text x=\"" << W - mr + 35 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">"
            << series[si].label << "</text>\n";
    }
    svg << "</svg>\n";

    std::ofstream out(out_path);
    if (!out) throw FormatError("plot: cannot open " + out_path);
    out << svg.str();
}

}  // namespace rqat::evalrun
