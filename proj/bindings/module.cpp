// Python bindings for the core operations: group-wise quantization, bit
// packing, PTQ (RTN/GPTQ), checkpoint I/O, the tiny decoder with sampling
// and evaluation, and the workflow runner.

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "rqat/evalrun.hpp"
#include "rqat/model.hpp"
#include "rqat/objectives.hpp"
#include "rqat/packing.hpp"
#include "rqat/ptq.hpp"
#include "rqat/quant.hpp"
#include "rqat/taskgen.hpp"
#include "rqat/workflow.hpp"

namespace py = pybind11;
using namespace rqat;

namespace {

std::vector<double> to_vec(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    return {a.data(), a.data() + a.size()};
}

py::array_t<double> to_array(const std::vector<double>& v, std::vector<std::size_t> shape) {
    py::array_t<double> out(shape);
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

quant::QuantSpec make_spec(int bits, std::size_t group_size, const std::string& scheme) {
    quant::QuantSpec spec;
    spec.bits = bits;
    spec.group_size = group_size;
    if (scheme == "symmetric")
        spec.scheme = quant::Scheme::Symmetric;
    else if (scheme == "asymmetric")
        spec.scheme = quant::Scheme::Asymmetric;
    else
        throw ConfigError("scheme must be 'symmetric' or 'asymmetric'");
    spec.validate();
    return spec;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Reasoning-QAT workbench core operations";

    py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<IntegrityError>(m, "IntegrityError", PyExc_RuntimeError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_RuntimeError);

    // -- quantization -------------------------------------------------------
    py::class_<quant::QuantizedTensor>(m, "QuantizedTensor")
        .def_property_readonly("shape",
                               [](const quant::QuantizedTensor& t) { return t.shape; })
        .def_property_readonly("codes",
                               [](const quant::QuantizedTensor& t) {
                                   py::array_t<std::int64_t> out(t.shape);
                                   std::copy(t.codes.begin(), t.codes.end(),
                                             out.mutable_data());
                                   return out;
                               })
        .def_property_readonly("scales",
                               [](const quant::QuantizedTensor& t) {
                                   std::vector<double> s;
                                   for (const auto& p : t.params) s.push_back(p.scale);
                                   return to_array(s, {s.size()});
                               })
        .def_property_readonly("zeros",
                               [](const quant::QuantizedTensor& t) {
                                   py::array_t<std::int64_t> out({t.params.size()});
                                   for (std::size_t i = 0; i < t.params.size(); ++i)
                                       out.mutable_data()[i] = t.params[i].zero;
                                   return out;
                               })
        .def_property_readonly("bits",
                               [](const quant::QuantizedTensor& t) { return t.spec.bits; });

    m.def(
        "quantize",
        [](py::array_t<double, py::array::c_style | py::array::forcecast> w, int bits,
           std::size_t group_size, const std::string& scheme) {
            if (w.ndim() != 2) throw DomainError("weights must be 2-D");
            return quant::quantize_grouped(to_vec(w), static_cast<std::size_t>(w.shape(0)),
                                           static_cast<std::size_t>(w.shape(1)),
                                           make_spec(bits, group_size, scheme));
        },
        py::arg("weights"), py::arg("bits"), py::arg("group_size") = 128,
        py::arg("scheme") = "symmetric",
        "Group-wise RTN quantization of a 2-D weight matrix.");

    m.def(
        "dequantize",
        [](const quant::QuantizedTensor& t) {
            return to_array(quant::dequantize_grouped(t), t.shape);
        },
        py::arg("tensor"));

    // -- packing ------------------------------------------------------------
    m.def(
        "pack_codes",
        [](py::array_t<std::int64_t, py::array::c_style | py::array::forcecast> codes,
           int bits) {
            auto [q_min, q_max] = quant::code_range(bits, quant::Scheme::Symmetric);
            quant::QuantParams p{1.0, 0, q_min, q_max};
            std::vector<std::int64_t> c(codes.data(), codes.data() + codes.size());
            packing::PackedBuffer buf = packing::pack(c, p, bits);
            return py::bytes(reinterpret_cast<const char*>(buf.words.data()),
                             buf.words.size() * sizeof(std::uint32_t));
        },
        py::arg("codes"), py::arg("bits"),
        "Pack symmetric codes into a little-endian continuous bitstream.");

    m.def(
        "unpack_codes",
        [](const py::bytes& blob, int bits, std::size_t count) {
            auto [q_min, q_max] = quant::code_range(bits, quant::Scheme::Symmetric);
            quant::QuantParams p{1.0, 0, q_min, q_max};
            packing::PackedBuffer buf;
            buf.bits = bits;
            buf.count = count;
            std::string s = blob;
            buf.words.resize((s.size() + 3) / 4, 0);
            std::memcpy(buf.words.data(), s.data(), s.size());
            std::vector<std::int64_t> codes = packing::unpack(buf, p);
            py::array_t<std::int64_t> out({codes.size()});
            std::copy(codes.begin(), codes.end(), out.mutable_data());
            return out;
        },
        py::arg("blob"), py::arg("bits"), py::arg("count"));

    // -- PTQ ----------------------------------------------------------------
    m.def(
        "rtn",
        [](py::array_t<double, py::array::c_style | py::array::forcecast> w, int bits,
           std::size_t group_size, const std::string& scheme) {
            if (w.ndim() != 2) throw DomainError("weights must be 2-D");
            std::size_t out_f = w.shape(0), in_f = w.shape(1);
            ptq::PtqResult r =
                ptq::rtn(to_vec(w), out_f, in_f, make_spec(bits, group_size, scheme));
            return py::make_tuple(r.quantized, to_array(r.latent, {out_f, in_f}),
                                  r.proxy_loss);
        },
        py::arg("weights"), py::arg("bits"), py::arg("group_size") = 128,
        py::arg("scheme") = "asymmetric");

    m.def(
        "gptq",
        [](py::array_t<double, py::array::c_style | py::array::forcecast> w,
           py::array_t<double, py::array::c_style | py::array::forcecast> calib, int bits,
           std::size_t group_size, const std::string& scheme, bool act_order,
           double percdamp) {
            if (w.ndim() != 2 || calib.ndim() != 2) throw DomainError("inputs must be 2-D");
            std::size_t out_f = w.shape(0), in_f = w.shape(1);
            if (static_cast<std::size_t>(calib.shape(1)) != in_f)
                throw DomainError("calibration width must match in_features");
            ptq::HessianAccumulator acc(in_f);
            acc.accumulate(to_vec(calib), static_cast<std::size_t>(calib.shape(0)));
            ptq::GptqOptions opts;
            opts.act_order = act_order;
            opts.percdamp = percdamp;
            ptq::PtqResult r = ptq::gptq(to_vec(w), out_f, in_f, acc,
                                         make_spec(bits, group_size, scheme), opts);
            return py::make_tuple(r.quantized, to_array(r.latent, {out_f, in_f}),
                                  r.proxy_loss);
        },
        py::arg("weights"), py::arg("calibration"), py::arg("bits"),
        py::arg("group_size") = 128, py::arg("scheme") = "asymmetric",
        py::arg("act_order") = false, py::arg("percdamp") = 0.01,
        "GPTQ with the Hessian accumulated from calibration rows [tokens x in].");

    // -- checkpoints --------------------------------------------------------
    m.def("inspect_checkpoint", &packing::describe_checkpoint, py::arg("path"));
    m.def("file_digest", [](const std::string& p) { return packing::file_digest(p); },
          py::arg("path"));

    // -- task + tokenizer ---------------------------------------------------
    m.def("tokenize", &taskgen::Tokenizer::tokenize, py::arg("text"));
    m.def("detokenize", &taskgen::Tokenizer::detokenize, py::arg("ids"));
    m.def("vocab_size", &taskgen::Tokenizer::vocab_size);

    py::class_<taskgen::Example>(m, "Example")
        .def_readonly("prompt", &taskgen::Example::prompt)
        .def_readonly("trace", &taskgen::Example::trace)
        .def_readonly("answer", &taskgen::Example::answer)
        .def("full_ids", &taskgen::Example::full_ids)
        .def("prompt_ids", &taskgen::Example::prompt_ids);

    m.def(
        "generate_dataset",
        [](int n_operands, std::size_t n_train, std::size_t n_eval, std::size_t n_calib,
           std::uint64_t seed, const std::string& operators) {
            taskgen::ArithTaskConfig cfg;
            cfg.n_operands = n_operands;
            cfg.n_train = n_train;
            cfg.n_eval = n_eval;
            cfg.n_calib = n_calib;
            cfg.seed = seed;
            cfg.operators = operators;
            taskgen::Dataset d = taskgen::generate(cfg);
            return py::make_tuple(d.train, d.eval, d.calib);
        },
        py::arg("n_operands") = 3, py::arg("n_train") = 3000, py::arg("n_eval") = 200,
        py::arg("n_calib") = 400, py::arg("seed") = 1, py::arg("operators") = "+-");

    // -- model --------------------------------------------------------------
    py::class_<model::TinyDecoder>(m, "TinyDecoder")
        .def(py::init([](std::size_t vocab, std::size_t d_model, std::size_t n_layers,
                         std::size_t n_heads, std::size_t d_ff, std::size_t max_seq_len,
                         std::uint64_t seed) {
                 model::ModelConfig cfg;
                 cfg.vocab_size = vocab;
                 cfg.d_model = d_model;
                 cfg.n_layers = n_layers;
                 cfg.n_heads = n_heads;
                 cfg.d_ff = d_ff;
                 cfg.max_seq_len = max_seq_len;
                 cfg.validate();
                 return model::TinyDecoder(cfg, seed);
             }),
             py::arg("vocab_size") = 20, py::arg("d_model") = 128, py::arg("n_layers") = 4,
             py::arg("n_heads") = 4, py::arg("d_ff") = 256, py::arg("max_seq_len") = 128,
             py::arg("seed") = 0)
        .def_static(
            "load",
            [](const std::string& path) { return model::TinyDecoder::load(path); },
            py::arg("path"))
        .def("save",
             [](const model::TinyDecoder& mdl, const std::string& path) {
                 mdl.save(path);
             },
             py::arg("path"))
        .def("quantizable_layers", &model::TinyDecoder::quantizable_layers)
        .def("param",
             [](model::TinyDecoder& mdl, const std::string& name) {
                 const auto& p = mdl.params().at(name);
                 return to_array(p.value, p.shape);
             },
             py::arg("name"))
        .def("full_logits",
             [](const model::TinyDecoder& mdl, const std::vector<std::size_t>& tokens) {
                 model::InferenceSession s(mdl);
                 return to_array(s.full_logits(tokens),
                                 {tokens.size(), mdl.config().vocab_size});
             },
             py::arg("tokens"))
        .def("sample",
             [](const model::TinyDecoder& mdl, const std::vector<std::size_t>& prompt,
                double temperature, double top_p, std::size_t max_new_tokens,
                std::uint64_t seed) {
                 model::InferenceSession s(mdl);
                 model::SamplerConfig sc;
                 sc.temperature = temperature;
                 sc.top_p = top_p;
                 sc.max_new_tokens = max_new_tokens;
                 sc.seed = seed;
                 model::SampleResult r =
                     model::sample(s, prompt, sc, taskgen::Tokenizer::kEos);
                 return py::make_tuple(r.ids, r.log_probs, r.entropies);
             },
             py::arg("prompt"), py::arg("temperature") = 0.6, py::arg("top_p") = 0.95,
             py::arg("max_new_tokens") = 48, py::arg("seed") = 0);

    // -- evaluation + workflow ----------------------------------------------
    m.def(
        "evaluate",
        [](const model::TinyDecoder& mdl, const std::vector<taskgen::Example>& eval_set,
           const std::vector<std::uint64_t>& seeds, double temperature, double top_p,
           std::size_t max_new_tokens) {
            model::SamplerConfig sc;
            sc.temperature = temperature;
            sc.top_p = top_p;
            sc.max_new_tokens = max_new_tokens;
            evalrun::EvalReport r = evalrun::evaluate(mdl, eval_set, sc, seeds);
            return r.to_json();
        },
        py::arg("model"), py::arg("eval_set"), py::arg("seeds"),
        py::arg("temperature") = 0.6, py::arg("top_p") = 0.95,
        py::arg("max_new_tokens") = 48,
        "Pass@1 accuracy over seeds; returns the report as a JSON string.");

    m.def(
        "run_workflow",
        [](const std::string& config_json) {
            workflow::WorkflowConfig cfg = workflow::WorkflowConfig::from_json(config_json);
            workflow::RunManifest man = workflow::run(cfg);
            return man.path();
        },
        py::arg("config_json"),
        "Run the 3-stage workflow from a JSON config; returns the manifest path.");

    m.def("resume_workflow",
          [](const std::string& manifest_path) {
              return workflow::resume(manifest_path).path();
          },
          py::arg("manifest_path"));

    m.def("workflow_default_config",
          []() { return workflow::WorkflowConfig().to_json(); });
}
