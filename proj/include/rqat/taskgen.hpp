#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rqat/common.hpp"

namespace rqat::taskgen {

// Fixed character-level tokenizer. Specials PAD/BOS/EOS, then the task
// alphabet; '#' is the answer marker.
class Tokenizer {
  public:
    static constexpr std::size_t kPad = 0;
    static constexpr std::size_t kBos = 1;
    static constexpr std::size_t kEos = 2;

    static std::size_t vocab_size();
    static std::size_t answer_marker();  // id of '#'
    static std::vector<std::size_t> tokenize(const std::string& text);
    static std::string detokenize(const std::vector<std::size_t>& ids);  // specials -> ""
};

struct ArithTaskConfig {
    int n_operands = 3;
    int lo = 0;
    int hi = 9;
    std::string operators = "+-";  // subset of "+-*"
    std::size_t n_train = 3000;
    std::size_t n_eval = 200;
    std::size_t n_calib = 400;
    std::uint64_t seed = 1;
    std::size_t max_seq_len = 64;

    void validate() const;
};

struct Example {
    std::string prompt;  // "3+5-2="
    std::string trace;   // "3+5=8;8-2=6;"
    long long answer = 0;

    std::string text() const { return prompt + trace + "#" + std::to_string(answer); }
    // BOS + prompt + trace + '#' + answer + EOS
    std::vector<std::size_t> full_ids() const;
    std::vector<std::size_t> prompt_ids() const;  // BOS + prompt
};

struct Dataset {
    std::vector<Example> train, eval, calib;
};

// Deterministic per seed; splits disjoint by problem string; every trace
// step is arithmetically correct under left-to-right evaluation.
Dataset generate(const ArithTaskConfig& cfg);

// Parse "a+b-c=" style text back into an example skeleton; returns nullopt
// when the text is not a well-formed generated example.
std::optional<Example> parse_example(const std::string& text);

enum class CalibKind { InDomain, OutOfDomain };

// In-domain: held-out task traces. Out-of-domain: seeded uniform random
// streams over the non-special vocab with the same token budget.
std::vector<std::vector<std::size_t>> make_calibration(CalibKind kind, std::size_t n_tokens,
                                                       std::uint64_t seed,
                                                       const ArithTaskConfig& cfg);

void save_dataset_jsonl(const std::string& path, const std::vector<Example>& examples);
std::vector<Example> load_dataset_jsonl(const std::string& path);

}  // namespace rqat::taskgen
