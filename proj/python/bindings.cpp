#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "riskwatch/alert.hpp"
#include "riskwatch/cli.hpp"
#include "riskwatch/datagen.hpp"
#include "riskwatch/eval.hpp"
#include "riskwatch/service.hpp"

namespace py = pybind11;
using namespace riskwatch;

namespace {

std::string generate_csv(std::uint64_t seed, int instruments, const std::string& start, const std::string& end) {
    GeneratorSpec spec;
    spec.seed = seed;
    spec.n_instruments = instruments;
    spec.start_date = Date::parse(start);
    spec.end_date = Date::parse(end);
    spec.validate();
    std::ostringstream out;
    write_records(generate(spec), out);
    return out.str();
}

py::tuple run_cli(const std::vector<std::string>& args, const std::map<std::string, std::string>& env) {
    std::vector<const char*> argv{"riskwatch"};
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    int code;
    {
        py::gil_scoped_release release;
        code = cli::run(int(argv.size()), argv.data(), out, err, env);
    }
    return py::make_tuple(code, out.str(), err.str());
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "riskwatch core bindings";

    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);

    m.def("generate_csv", &generate_csv, py::arg("seed") = 42, py::arg("instruments") = 10,
          py::arg("start") = "2016-01-01", py::arg("end") = "2023-12-31",
          "Synthetic records as CSV text.");

    m.def(
        "roc_auc",
        [](const std::vector<double>& scores, const std::vector<int>& labels) { return eval::roc_auc(scores, labels).auc; },
        py::arg("scores"), py::arg("labels"));

    m.def(
        "backtest_windows",
        [](std::size_t n, std::size_t initial_train, std::size_t horizon, std::size_t step, std::size_t purge,
           bool expanding) {
            eval::BacktestSpec spec;
            spec.initial_train = initial_train;
            spec.horizon = horizon;
            spec.step = step;
            spec.purge = purge;
            spec.mode = expanding ? eval::BacktestMode::expanding : eval::BacktestMode::sliding;
            std::vector<py::dict> out;
            for (const auto& w : eval::backtest_windows(n, spec)) {
                py::dict d;
                d["train"] = py::make_tuple(w.train.begin, w.train.end);
                d["fit"] = py::make_tuple(w.fit.begin, w.fit.end);
                d["test"] = py::make_tuple(w.test.begin, w.test.end);
                out.push_back(d);
            }
            return out;
        },
        py::arg("n"), py::arg("initial_train"), py::arg("horizon"), py::arg("step"), py::arg("purge") = 0,
        py::arg("expanding") = false);

    m.def("posterior", &alert::posterior, py::arg("prior"), py::arg("likelihood"), py::arg("evidence"));
    m.def(
        "optimal_threshold", [](double fp, double fn) { return alert::optimal_threshold({fp, fn}); },
        py::arg("cost_fp"), py::arg("cost_fn"));

    m.def("run", &run_cli, py::arg("args"), py::arg("env") = std::map<std::string, std::string>{},
          "Run the command-line interface in process; returns (exit_code, stdout, stderr).");
}
