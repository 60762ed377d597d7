#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>

#include <doctest.h>

#include "rqat/objectives.hpp"
#include "rqat/taskgen.hpp"

using namespace rqat;

namespace {

long long eval_left_to_right(const std::string& prompt) {
    // "3+5-2=" -> 6
    long long acc = 0;
    char op = '+';
    std::size_t i = 0;
    while (i < prompt.size() && prompt[i] != '=') {
        long long num = 0;
        while (i < prompt.size() && std::isdigit(static_cast<unsigned char>(prompt[i])))
            num = num * 10 + (prompt[i++] - '0');
        if (op == '+') acc += num;
        else if (op == '-') acc -= num;
        else acc *= num;
        if (i < prompt.size() && prompt[i] != '=') op = prompt[i++];
    }
    return acc;
}

}  // namespace

TEST_CASE("tokenizer: fixed ids, roundtrip, rejection") {
    CHECK(taskgen::Tokenizer::vocab_size() == 20);
    CHECK(taskgen::Tokenizer::kPad == 0);
    CHECK(taskgen::Tokenizer::kBos == 1);
    CHECK(taskgen::Tokenizer::kEos == 2);
    std::string text = "3+5=8;8-2=6;#6";
    auto ids = taskgen::Tokenizer::tokenize(text);
    CHECK(taskgen::Tokenizer::detokenize(ids) == text);
    CHECK(taskgen::Tokenizer::answer_marker() ==
          taskgen::Tokenizer::tokenize("#").at(0));
    CHECK_THROWS_AS(taskgen::Tokenizer::tokenize("abc"), DomainError);
}

TEST_CASE("generation is deterministic per seed and differs across seeds") {
    taskgen::ArithTaskConfig cfg;
    cfg.n_train = 40;
    cfg.n_eval = 10;
    cfg.n_calib = 10;
    cfg.seed = 5;
    taskgen::Dataset a = taskgen::generate(cfg);
    taskgen::Dataset b = taskgen::generate(cfg);
    REQUIRE(a.train.size() == 40);
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].prompt == b.train[i].prompt);
        CHECK(a.train[i].trace == b.train[i].trace);
        CHECK(a.train[i].answer == b.train[i].answer);
    }
    cfg.seed = 6;
    taskgen::Dataset c = taskgen::generate(cfg);
    bool differs = false;
    for (std::size_t i = 0; i < a.train.size(); ++i)
        if (a.train[i].prompt != c.train[i].prompt) differs = true;
    CHECK(differs);
}

TEST_CASE("splits are disjoint by problem string") {
    taskgen::ArithTaskConfig cfg;
    cfg.n_train = 120;
    cfg.n_eval = 40;
    cfg.n_calib = 40;
    cfg.seed = 3;
    taskgen::Dataset d = taskgen::generate(cfg);
    std::set<std::string> train, evals, calib;
    for (const auto& e : d.train) train.insert(e.prompt);
    for (const auto& e : d.eval) evals.insert(e.prompt);
    for (const auto& e : d.calib) calib.insert(e.prompt);
    CHECK(train.size() == d.train.size());
    for (const auto& p : evals) CHECK(train.count(p) == 0);
    for (const auto& p : calib) {
        CHECK(train.count(p) == 0);
        CHECK(evals.count(p) == 0);
    }
}

TEST_CASE("answers and traces are arithmetically correct") {
    taskgen::ArithTaskConfig cfg;
    cfg.n_train = 60;
    cfg.n_eval = 10;
    cfg.n_calib = 10;
    cfg.seed = 9;
    taskgen::Dataset d = taskgen::generate(cfg);
    for (const auto& e : d.train) {
        CHECK(e.answer == eval_left_to_right(e.prompt));
        // every trace step "a<op>b=c;" must hold
        std::string t = e.trace;
        std::size_t pos = 0;
        while ((pos = t.find(';')) != std::string::npos) {
            std::string step = t.substr(0, pos);
            t = t.substr(pos + 1);
            auto eq = step.find('=');
            REQUIRE(eq != std::string::npos);
            CHECK(eval_left_to_right(step.substr(0, eq + 1)) ==
                  std::stoll(step.substr(eq + 1)));
        }
        // sequence fits the configured budget
        CHECK(e.full_ids().size() <= cfg.max_seq_len);
        // full ids: BOS ... EOS with the marker inside
        auto ids = e.full_ids();
        CHECK(ids.front() == taskgen::Tokenizer::kBos);
        CHECK(ids.back() == taskgen::Tokenizer::kEos);
        CHECK(std::count(ids.begin(), ids.end(), taskgen::Tokenizer::answer_marker()) == 1);
    }
}

TEST_CASE("verify_answer accepts exactly the generated answer") {
    taskgen::ArithTaskConfig cfg;
    cfg.n_train = 30;
    cfg.n_eval = 5;
    cfg.n_calib = 5;
    cfg.seed = 12;
    taskgen::Dataset d = taskgen::generate(cfg);
    for (const auto& e : d.train) {
        // responses are the tokens after the prompt
        auto full = e.full_ids();
        auto prompt = e.prompt_ids();
        std::vector<std::size_t> resp(full.begin() + prompt.size(), full.end());
        CHECK(objectives::verify_answer(resp, e.answer) == 1.0);
        CHECK(objectives::verify_answer(resp, e.answer + 1) == 0.0);
    }
    // no marker, leading zeros, whitespace, negatives
    CHECK(objectives::verify_answer(taskgen::Tokenizer::tokenize("3+5=8;"), 8) == 0.0);
    CHECK(objectives::verify_answer(taskgen::Tokenizer::tokenize("# 042"), 42) == 1.0);
    CHECK(objectives::verify_answer(taskgen::Tokenizer::tokenize("#-7"), -7) == 1.0);
    CHECK(objectives::verify_answer(taskgen::Tokenizer::tokenize("#3#15"), 15) == 1.0);
    CHECK(objectives::verify_answer(taskgen::Tokenizer::tokenize("# "), 0) == 0.0);
}

TEST_CASE("parse_example rebuilds the generated text") {
    taskgen::ArithTaskConfig cfg;
    cfg.n_train = 20;
    cfg.n_eval = 5;
    cfg.n_calib = 5;
    cfg.seed = 21;
    taskgen::Dataset d = taskgen::generate(cfg);
    for (const auto& e : d.train) {
        auto parsed = taskgen::parse_example(e.text());
        REQUIRE(parsed.has_value());
        CHECK(parsed->prompt == e.prompt);
        CHECK(parsed->answer == e.answer);
    }
    CHECK_FALSE(taskgen::parse_example("3+5=9;#9").has_value());  // wrong arithmetic
    CHECK_FALSE(taskgen::parse_example("garbage").has_value());
}

TEST_CASE("calibration streams: exact budget, determinism, domain") {
    taskgen::ArithTaskConfig cfg;
    cfg.seed = 4;
    for (auto kind : {taskgen::CalibKind::InDomain, taskgen::CalibKind::OutOfDomain}) {
        auto a = taskgen::make_calibration(kind, 500, 77, cfg);
        auto b = taskgen::make_calibration(kind, 500, 77, cfg);
        std::size_t total = 0;
        for (const auto& s : a) total += s.size();
        CHECK(total == 500);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    }
    auto ood = taskgen::make_calibration(taskgen::CalibKind::OutOfDomain, 256, 5, cfg);
    for (const auto& s : ood)
        for (std::size_t id : s) {
            CHECK(id >= 3);  // no specials in the random stream
            CHECK(id < taskgen::Tokenizer::vocab_size());
        }
}

TEST_CASE("JSONL roundtrip and malformed-line error") {
    taskgen::ArithTaskConfig cfg;
    cfg.n_train = 15;
    cfg.n_eval = 5;
    cfg.n_calib = 5;
    cfg.seed = 2;
    taskgen::Dataset d = taskgen::generate(cfg);
    std::string path = "taskgen_test.jsonl";
    taskgen::save_dataset_jsonl(path, d.train);
    auto loaded = taskgen::load_dataset_jsonl(path);
    REQUIRE(loaded.size() == d.train.size());
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded[i].prompt == d.train[i].prompt);
        CHECK(loaded[i].trace == d.train[i].trace);
        CHECK(loaded[i].answer == d.train[i].answer);
    }
    {
        std::ofstream f(path, std::ios::app);
        f << "{not json\n";
    }
    try {
        taskgen::load_dataset_jsonl(path);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find(std::to_string(d.train.size() + 1)) !=
              std::string::npos);
    }
    std::remove(path.c_str());
}
