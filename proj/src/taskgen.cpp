#include "rqat/taskgen.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

namespace rqat::taskgen {

namespace {

constexpr const char* kAlphabet = "0123456789+-*= ;#";
constexpr std::size_t kNumSpecials = 3;

int char_id(char c) {
    const char* p = std::strchr(kAlphabet, c);
    if (!p || c == '\0') return -1;
    return static_cast<int>(p - kAlphabet) + static_cast<int>(kNumSpecials);
}

}  // namespace

std::size_t Tokenizer::vocab_size() { return kNumSpecials + std::strlen(kAlphabet); }

std::size_t Tokenizer::answer_marker() { return static_cast<std::size_t>(char_id('#')); }

std::vector<std::size_t> Tokenizer::tokenize(const std::string& text) {
    std::vector<std::size_t> ids;
    ids.reserve(text.size());
    for (char c : text) {
        int id = char_id(c);
        if (id < 0) throw DomainError(std::string("tokenize: unsupported character '") + c + "'");
        ids.push_back(static_cast<std::size_t>(id));
    }
    return ids;
}

std::string Tokenizer::detokenize(const std::vector<std::size_t>& ids) {
    std::string out;
    for (std::size_t id : ids) {
        if (id >= vocab_size()) throw DomainError("detokenize: id out of range");
        if (id < kNumSpecials) continue;
        out.push_back(kAlphabet[id - kNumSpecials]);
    }
    return out;
}

void ArithTaskConfig::validate() const {
    if (n_operands < 2) throw ConfigError("ArithTaskConfig: n_operands must be >= 2");
    if (hi < lo) throw ConfigError("ArithTaskConfig: operand range is empty");
    if (operators.empty() || operators.find_first_not_of("+-*") != std::string::npos)
        throw ConfigError("ArithTaskConfig: operators must be a nonempty subset of +-*");
}

std::vector<std::size_t> Example::full_ids() const {
    std::vector<std::size_t> ids{Tokenizer::kBos};
    auto body = Tokenizer::tokenize(text());
    ids.insert(ids.end(), body.begin(), body.end());
    ids.push_back(Tokenizer::kEos);
    return ids;
}

std::vector<std::size_t> Example::prompt_ids() const {
    std::vector<std::size_t> ids{Tokenizer::kBos};
    auto body = Tokenizer::tokenize(prompt);
    ids.insert(ids.end(), body.begin(), body.end());
    return ids;
}

namespace {

long long apply_op(long long a, char op, long long b) {
    switch (op) {
        case '+': return a + b;
        case '-': return a - b;
        case '*': return a * b;
        default: throw ConfigError("unknown operator");
    }
}

Example make_example(const std::vector<long long>& operands, const std::string& ops) {
    Example ex;
    std::ostringstream prompt;
    prompt << operands[0];
    for (std::size_t i = 0; i < ops.size(); ++i) prompt << ops[i] << operands[i + 1];
    prompt << '=';
    ex.prompt = prompt.str();

    // Left-to-right evaluation with explicit intermediate totals.
    std::ostringstream trace;
    long long acc = operands[0];
    for (std::size_t i = 0; i < ops.size(); ++i) {
        long long next = apply_op(acc, ops[i], operands[i + 1]);
        trace << acc << ops[i] << operands[i + 1] << '=' << next << ';';
        acc = next;
    }
    ex.trace = trace.str();
    ex.answer = acc;
    return ex;
}

}  // namespace

Dataset generate(const ArithTaskConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<long long> operand(cfg.lo, cfg.hi);
    std::uniform_int_distribution<std::size_t> op_pick(0, cfg.operators.size() - 1);

    const std::size_t want = cfg.n_train + cfg.n_eval + cfg.n_calib;
    std::set<std::string> seen;
    std::vector<Example> pool;
    std::size_t attempts = 0;
    const std::size_t max_attempts = want * 200 + 10000;
    while (pool.size() < want) {
        if (++attempts > max_attempts)
            throw ConfigError("generate: cannot draw enough distinct problems; widen the range");
        std::vector<long long> operands;
        std::string ops;
        for (int i = 0; i < cfg.n_operands; ++i) operands.push_back(operand(rng));
        for (int i = 0; i + 1 < cfg.n_operands; ++i) ops.push_back(cfg.operators[op_pick(rng)]);
        Example ex = make_example(operands, ops);
        if (ex.full_ids().size() > cfg.max_seq_len)
            throw ConfigError("generate: example exceeds max_seq_len; shrink operands or range");
        if (seen.insert(ex.prompt).second) pool.push_back(std::move(ex));
    }

    Dataset ds;
    ds.train.assign(pool.begin(), pool.begin() + static_cast<long>(cfg.n_train));
    ds.eval.assign(pool.begin() + static_cast<long>(cfg.n_train),
                   pool.begin() + static_cast<long>(cfg.n_train + cfg.n_eval));
    ds.calib.assign(pool.begin() + static_cast<long>(cfg.n_train + cfg.n_eval), pool.end());
    return ds;
}

std::optional<Example> parse_example(const std::string& text) {
    auto eq = text.find('=');
    if (eq == std::string::npos || eq + 1 >= text.size()) return std::nullopt;
    std::string prompt = text.substr(0, eq + 1);

    // prompt must be operand (op operand)* '='
    std::vector<long long> operands;
    std::string ops;
    std::size_t i = 0;
    auto read_int = [&](long long& out) -> bool {
        std::size_t start = i;
        if (i < eq && prompt[i] == '-') ++i;
        std::size_t dstart = i;
        while (i < eq && std::isdigit(static_cast<unsigned char>(prompt[i]))) ++i;
        if (i == dstart) return false;
        out = std::stoll(prompt.substr(start, i - start));
        return true;
    };
    long long v = 0;
    if (!read_int(v)) return std::nullopt;
    operands.push_back(v);
    while (i < eq) {
        char op = prompt[i];
        if (op != '+' && op != '-' && op != '*') return std::nullopt;
        ++i;
        if (!read_int(v)) return std::nullopt;
        operands.push_back(v);
        ops.push_back(op);
    }
    if (operands.size() < 2) return std::nullopt;

    Example rebuilt = make_example(operands, ops);
    if (text.rfind(rebuilt.text(), 0) != 0 && text != rebuilt.prompt + rebuilt.trace)
        return std::nullopt;
    return rebuilt;
}

std::vector<std::vector<std::size_t>> make_calibration(CalibKind kind, std::size_t n_tokens,
                                                       std::uint64_t seed,
                                                       const ArithTaskConfig& cfg) {
    if (n_tokens == 0) throw DomainError("make_calibration: n_tokens must be positive");
    std::vector<std::vector<std::size_t>> seqs;
    if (kind == CalibKind::InDomain) {
        // Held-out traces from a seed-derived generator stream.
        ArithTaskConfig c = cfg;
        c.seed = seed ^ 0x9e3779b97f4a7c15ULL;
        c.n_train = (n_tokens / 16) + 64;
        c.n_eval = 0;
        c.n_calib = 0;
        Dataset ds = generate(c);
        std::size_t budget = n_tokens;
        for (const auto& ex : ds.train) {
            if (budget == 0) break;
            auto ids = ex.full_ids();
            if (ids.size() > budget) ids.resize(budget);
            budget -= ids.size();
            seqs.push_back(std::move(ids));
        }
        if (budget != 0) throw ConfigError("make_calibration: could not fill token budget");
    } else {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<std::size_t> tok(3, Tokenizer::vocab_size() - 1);
        std::size_t budget = n_tokens;
        const std::size_t chunk = 32;
        while (budget > 0) {
            std::size_t len = std::min(chunk, budget);
            std::vector<std::size_t> ids(len);
            for (auto& id : ids) id = tok(rng);
            budget -= len;
            seqs.push_back(std::move(ids));
        }
    }
    return seqs;
}

void save_dataset_jsonl(const std::string& path, const std::vector<Example>& examples) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ConfigError("save_dataset_jsonl: cannot open " + path);
    for (const auto& ex : examples) {
        nlohmann::json j{{"prompt", ex.prompt}, {"trace", ex.trace}, {"answer", ex.answer}};
        out << j.dump() << "\n";
    }
}

std::vector<Example> load_dataset_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("load_dataset_jsonl: cannot open " + path);
    std::vector<Example> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw FormatError("load_dataset_jsonl: bad record at line " + std::to_string(line_no));
        Example ex;
        ex.prompt = j.at("prompt").get<std::string>();
        ex.trace = j.at("trace").get<std::string>();
        ex.answer = j.at("answer").get<long long>();
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace rqat::taskgen
