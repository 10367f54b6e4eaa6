#include "ann/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <ostream>
#include <string_view>

#include "ann/autograd.hpp"
#include "ann/bench.hpp"
#include "ann/config.hpp"
#include "ann/cost_model.hpp"
#include "ann/equivalence.hpp"
#include "ann/rng.hpp"
#include "ann/tensor_io.hpp"

namespace ann::cli {

namespace {

struct Options {
  std::string config;
  bool table1 = false;
  bool full = false;
  std::string out;
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << text;
}

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

std::optional<Tensor> low_input(const ExperimentConfig& c) {
  if (!is_fusion(c.block)) return std::nullopt;
  return seeded_fill(c.low_shape->dims(), derive_seed(c.seed, 2), Distribution::uniform_pm1);
}

int cmd_demo(const ExperimentConfig& c, const Options& o, std::ostream& out) {
  const Tensor x = seeded_fill(c.shape.dims(), derive_seed(c.seed, 1), Distribution::uniform_pm1);
  const std::optional<Tensor> low = low_input(c);
  const BlockWeights w = init_weights(c.block_config, derive_seed(c.seed, 3));
  const SamplerSpec* sampler = is_sampled(c.block) ? &*c.block_config.sampler : nullptr;
  const AttentionTrace t = attention_forward(x, low ? *low : x, c.block_config, w, sampler);

  const auto values = t.output.data();
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());

  out << "block " << to_string(c.block) << ", output shape " << t.output.dim(0) << "x" << t.output.dim(1) << "x"
      << t.output.dim(2) << "\n";
  out << "min " << fmt("%.6g", *lo) << "  mean " << fmt("%.6g", mean) << "  max " << fmt("%.6g", *hi) << "\n";

  int status = kSuccess;
  if (c.block_config.normalization == Normalization::softmax) {
    double worst = 0.0;
    const std::size_t rows = t.attention.rows(), cols = t.attention.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < cols; ++k) s += t.attention[r * cols + k];
      worst = std::max(worst, std::abs(s - 1.0));
    }
    const bool ok = worst <= 1e-12;
    out << "attention row-sum check: " << (ok ? "PASS" : "FAIL") << " (max |sum-1| = " << fmt("%.3g", worst) << ")\n";
    if (!ok) status = kCheckFailed;
  } else {
    out << "attention row-sum check: SKIP (normalization " << to_string(c.block_config.normalization) << ")\n";
  }

  const std::string path = !o.out.empty() ? o.out : c.output.value_or("");
  if (!path.empty()) {
    write_tensor_file(path, t.output);
    out << "wrote " << path << "\n";
  }
  return status;
}

int cmd_equivalence(const ExperimentConfig& c, std::ostream& out, std::ostream& err) {
  if (!is_sampled(c.block)) {
    err << "block: equivalence needs an asymmetric block (apnb or afnb), got " << to_string(c.block) << "\n";
    return kConfigError;
  }
  EquivalenceOptions opts;
  opts.cases = c.equivalence.cases;
  opts.seed = c.seed;
  opts.corrupt_weights = c.equivalence.corrupt;
  const EquivalenceResult r = run_equivalence_suite(c.block, opts);
  const char* ref = c.block == BlockKind::apnb ? "nb" : "fnb";
  out << to_string(c.block) << "(identity sampler) vs " << ref << ": " << r.cases
      << " cases, max deviation " << fmt("%.3e", r.max_deviation) << "\n";
  if (!r.passed()) {
    out << "FAIL: deviation >= 1e-12 at case seed " << *r.failing_seed << "\n";
    return kCheckFailed;
  }
  out << "PASS\n";
  return kSuccess;
}

nlohmann::json cost_json(const CostReport& r) {
  const Ratio t = r.complexity_ratio();
  return {{"block", to_string(r.kind)},
          {"H", r.query.height},
          {"W", r.query.width},
          {"C", r.query.channels},
          {"Chat", r.embed_channels},
          {"S", r.anchors},
          {"macs_total", r.macs_total()},
          {"macs_matmul", r.macs_matmul()},
          {"macs", {{"phi", r.macs_phi}, {"key_value", r.macs_key_value}, {"out", r.macs_out},
                    {"similarity", r.macs_similarity}, {"aggregation", r.macs_aggregation}, {"pooling", r.macs_pooling}}},
          {"similarity_bytes", r.similarity_bytes},
          {"peak_bytes", r.peak_bytes},
          {"element_bytes", r.element_bytes},
          {"complexity_ratio", {{"num", t.num}, {"den", t.den}}},
          {"ratio", static_cast<double>(t.den) / static_cast<double>(t.num)}};
}

int cmd_flops(const ExperimentConfig& c, const Options& o, std::ostream& out) {
  const CostOptions copts{c.element_bytes};
  if (o.table1) {
    int status = kSuccess;
    out << "block,H,W,estimated_gmacs,reported_gmacs,relative_error,tolerance,status\n";
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : compare_reference_costs(copts)) {
      const std::string verdict = !row.asserted ? "reported" : row.within_tolerance ? "PASS" : "FAIL";
      if (!row.within_tolerance) status = kCheckFailed;
      out << to_string(row.reference.kind) << ',' << row.reference.height << ',' << row.reference.width << ','
          << fmt("%.2f", row.estimated_gmacs) << ',' << fmt("%.1f", row.reference.reported_gmacs) << ','
          << fmt("%.4f", row.relative_error) << ',' << (row.asserted ? fmt("%.2f", *row.reference.tolerance) : "-")
          << ',' << verdict << '\n';
      nlohmann::json j = cost_json(row.estimate);
      j["reported_gmacs"] = row.reference.reported_gmacs;
      j["relative_error"] = row.relative_error;
      j["asserted"] = row.asserted;
      rows.push_back(j);
    }
    if (!o.out.empty()) write_text(o.out, rows.dump(2) + "\n");
    return status;
  }

  std::vector<Shape3> shapes = c.sweep.shapes;
  if (shapes.empty()) shapes.push_back(c.shape);
  std::vector<BlockKind> kinds = c.sweep.blocks;
  if (kinds.empty()) kinds.push_back(c.block);
  std::vector<CostCase> cases;
  for (auto k : kinds) cases.push_back({k, c.block_config});
  const auto reports = sweep(shapes, cases, copts);

  std::string csv = cost_csv_header() + "\n";
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : reports) {
    csv += cost_csv_row(r) + "\n";
    rows.push_back(cost_json(r));
  }
  out << csv;
  if (!o.out.empty()) {
    const bool as_json = o.out.size() >= 5 && o.out.ends_with(".json");
    write_text(o.out, as_json ? rows.dump(2) + "\n" : csv);
  }
  return kSuccess;
}

nlohmann::json gradcheck_json(const ExperimentConfig& c, const GradCheckReport& r) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& e : r.entries) {
    tensors.push_back({{"name", e.name},
                       {"elements", e.elements},
                       {"max_rel_error", e.max_rel_error},
                       {"max_abs_error", e.max_abs_error}});
  }
  return {{"block", to_string(c.block)},
          {"normalization", to_string(c.block_config.normalization)},
          {"combine", to_string(c.block_config.combine)},
          {"share_key_value", c.block_config.share_key_value},
          {"tolerance", 1e-4},
          {"max_rel_error", r.max_rel_error},
          {"attempts", r.attempts},
          {"passed", r.passed},
          {"tensors", tensors}};
}

int cmd_gradcheck(const ExperimentConfig& c, const Options& o, std::ostream& out, std::ostream& err) {
  if (c.shape.elements() > kGradcheckElementCap ||
      (c.low_shape && is_fusion(c.block) && c.low_shape->elements() > kGradcheckElementCap)) {
    err << "shape: gradcheck is limited to C*H*W <= " << kGradcheckElementCap << "\n";
    return kConfigError;
  }
  GradCheckOptions opts;
  opts.eps = c.gradcheck_eps;
  const auto low = is_fusion(c.block) ? c.low_shape : std::nullopt;
  const GradCheckReport r = gradcheck_block(c.block, c.block_config, c.shape, low, c.seed, opts);
  const nlohmann::json j = gradcheck_json(c, r);
  out << j.dump(2) << "\n";
  if (!o.out.empty()) write_text(o.out, j.dump(2) + "\n");
  return r.passed ? kSuccess : kCheckFailed;
}

int cmd_bench(ExperimentConfig c, const Options& o, std::ostream& out, std::ostream& err) {
  std::vector<BlockKind> kinds = c.bench.blocks;
  if (kinds.empty()) kinds.push_back(c.block);
  unsigned threads = c.bench.threads;
  if (const char* env = std::getenv("ANN_THREADS")) {
    const std::string_view text(env);
    unsigned v = 0;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || end != text.data() + text.size() || v < 1) {
      err << "ANN_THREADS: must be a positive integer\n";
      return kConfigError;
    }
    threads = v;
  }
  if (o.full) {
    c.shape.channels = 2048;
    c.block_config.in_channels = 2048;
    c.block_config.embed_channels = 256;
    c.block_config.out_channels.reset();
    if (c.low_shape) {
      c.low_shape->channels = 2048;
      c.block_config.low_channels = 2048;
    }
  }

  std::vector<BenchSpec> specs;
  for (auto k : kinds) {
    BenchSpec s;
    s.kind = k;
    s.shape = c.shape;
    s.low_shape = c.low_shape;
    s.cfg = c.block_config;
    s.warmup = c.bench.warmup;
    s.measured = c.bench.measured;
    s.seed = c.seed;
    s.query_block = o.full ? c.shape.positions() : c.bench.query_block;
    s.memory_budget = c.bench.memory_budget_mb << 20;
    s.threads = threads;
    try {
      s.validate();
    } catch (const ParameterError& e) {
      err << "bench: " << e.what() << "\n";
      return kConfigError;
    }
    specs.push_back(s);
  }

  const auto available = available_memory_bytes();
  for (const auto& s : specs) {
    const std::uint64_t need = required_bytes(s);
    if (available && need > *available) {
      err << "preflight: " << to_string(s.kind) << " needs " << need << " bytes of tensor memory, only " << *available
          << " bytes available\n";
      return kPreflightFailed;
    }
  }

  std::vector<BenchReport> reports;
  for (const auto& s : specs) {
    reports.push_back(run_bench(s));
    out << format_table(reports.back());
  }
  nlohmann::json j{{"reports", nlohmann::json::array()}, {"comparisons", nlohmann::json::array()}};
  for (const auto& r : reports) j["reports"].push_back(to_json(r));
  for (std::size_t i = 1; i < reports.size(); ++i) {
    const BenchComparison cmp = compare(reports.front(), reports[i]);
    out << format_table(cmp);
    j["comparisons"].push_back(to_json(cmp));
  }
  if (!o.out.empty()) write_text(o.out, j.dump(2) + "\n");
  if (c.bench.csv) write_text(*c.bench.csv, phase_csv(reports));
  return kSuccess;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Asymmetric non-local attention blocks: checks, cost model and benchmarks", "ann"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&o](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", o.config, "JSON experiment config");
    if (config_required) opt->required();
    sub->add_option("--out", o.out, "output path");
    sub->add_flag("--table1", o.table1, "compare against the reference NB/APNB cost figures (flops)");
    sub->add_flag("--full", o.full, "benchmark at full channel width (C=2048, Chat=256) after a memory preflight");
  };
  auto* demo = app.add_subcommand("demo", "run one forward pass on a seeded input");
  auto* equivalence = app.add_subcommand("equivalence", "identity-sampler equivalence suite");
  auto* flops = app.add_subcommand("flops", "analytic MAC and memory estimates");
  auto* gradcheck = app.add_subcommand("gradcheck", "analytic gradients vs finite differences");
  auto* bench = app.add_subcommand("bench", "time block forwards phase by phase");
  for (auto* sub : {demo, equivalence, gradcheck, bench}) add_common(sub, true);
  add_common(flops, false);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kSuccess;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n" << app.help();
    return kConfigError;
  }

  try {
    if (flops->parsed() && o.config.empty()) {
      if (!o.table1) {
        err << "--config: required unless --table1 is given\n";
        return kConfigError;
      }
      return cmd_flops(ExperimentConfig{}, o, out);
    }
    const ExperimentConfig c = load_config(o.config);
    if (demo->parsed()) return cmd_demo(c, o, out);
    if (equivalence->parsed()) return cmd_equivalence(c, out, err);
    if (flops->parsed()) return cmd_flops(c, o, out);
    if (gradcheck->parsed()) return cmd_gradcheck(c, o, out, err);
    return cmd_bench(c, o, out, err);
  } catch (const ConfigError& e) {
    err << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
}

}  // namespace ann::cli
