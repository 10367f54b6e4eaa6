#include "ann/bench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ann/rng.hpp"

namespace ann {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

Tensor row_block(const Tensor& a, std::size_t r0, std::size_t rows) {
  const auto first = a.data().begin() + static_cast<std::ptrdiff_t>(r0 * a.cols());
  return Tensor({rows, a.cols()}, Tensor::Storage(first, first + static_cast<std::ptrdiff_t>(rows * a.cols())));
}

std::atomic<bool> g_bench_running{false};

class RunGuard {
 public:
  RunGuard() {
    if (g_bench_running.exchange(true)) throw ParameterError("a benchmark is already running in this process");
  }
  ~RunGuard() { g_bench_running.store(false); }
  RunGuard(const RunGuard&) = delete;
  RunGuard& operator=(const RunGuard&) = delete;
};

const SamplerSpec* sampler_for(BlockKind kind, const BlockConfig& cfg) {
  if (!is_sampled(kind)) return nullptr;
  if (!cfg.sampler) throw ParameterError(std::string(to_string(kind)) + " requires a sampler");
  return &*cfg.sampler;
}

}  // namespace

std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::projection:
      return "projection";
    case Phase::sampling:
      return "sampling";
    case Phase::similarity:
      return "similarity";
    case Phase::normalization:
      return "normalization";
    case Phase::aggregation:
      return "aggregation";
    case Phase::output_projection:
      return "output_projection";
    case Phase::combine:
      return "combine";
  }
  return "unknown";
}

void BenchSpec::validate() const {
  if (warmup < 1) throw ParameterError("bench warmup must be >= 1");
  if (measured < 3) throw ParameterError("bench measured iterations must be >= 3");
  if (threads < 1) throw ParameterError("bench threads must be >= 1");
  if (is_fusion(kind) && !low_shape) throw ParameterError("fusion bench needs a low-level shape");
  cfg.validate();
  if (shape.channels != cfg.in_channels) throw ParameterError("bench shape channels differ from in_channels");
  if (low_shape && is_fusion(kind) && low_shape->channels != cfg.key_channels()) {
    throw ParameterError("bench low shape channels differ from low_channels");
  }
  sampler_for(kind, cfg);
}

std::size_t BenchSpec::key_positions() const {
  return is_fusion(kind) && low_shape ? low_shape->positions() : shape.positions();
}

std::size_t BenchSpec::resolved_query_block() const {
  const std::size_t n = shape.positions();
  if (query_block != 0) return std::min(query_block, n);
  const std::uint64_t per_row = 2 * key_positions() * sizeof(double);
  return static_cast<std::size_t>(std::clamp<std::uint64_t>(memory_budget / per_row, 1, n));
}

void PhaseStats::add(double ms) {
  samples_ms.push_back(ms);
  const auto [lo, hi] = std::minmax_element(samples_ms.begin(), samples_ms.end());
  min_ms = *lo;
  max_ms = *hi;
  mean_ms = std::accumulate(samples_ms.begin(), samples_ms.end(), 0.0) / static_cast<double>(samples_ms.size());
}

Tensor instrumented_forward(BlockKind kind, const Tensor& high, const Tensor* low, const BlockConfig& cfg,
                            const BlockWeights& w, std::size_t query_block, unsigned threads, PhaseTimes& times) {
  cfg.validate();
  check_weights(cfg, w);
  if (is_fusion(kind) && !low) throw ParameterError("fusion blocks need a low-level input");
  const SamplerSpec* sampler = sampler_for(kind, cfg);
  const Tensor& keys = is_fusion(kind) ? *low : high;
  const Shape3 qs = high.shape3();
  const Shape3 ks = keys.shape3();
  if (qs.channels != cfg.in_channels || ks.channels != cfg.key_channels()) {
    throw ShapeError("block inputs do not match configured channel counts");
  }
  times = {};
  auto timed = [&times](Phase p, Clock::time_point since) { times.ms[static_cast<std::size_t>(p)] += elapsed_ms(since); };

  auto t0 = Clock::now();
  const Tensor q2 = flatten_spatial(high);
  const Tensor phi = w.phi.apply(q2);
  std::optional<Tensor> k2;
  if (is_fusion(kind)) k2 = flatten_spatial(keys);
  const Tensor theta = w.theta.apply(k2 ? *k2 : q2);
  const std::optional<Tensor> gamma =
      w.shares_key_value() ? std::nullopt : std::optional<Tensor>(w.gamma().apply(k2 ? *k2 : q2));
  timed(Phase::projection, t0);

  t0 = Clock::now();
  std::optional<Tensor> theta_sampled, gamma_sampled;
  if (sampler && !sampler->is_identity()) {
    const Dims embedded{cfg.embed_channels, ks.height, ks.width};
    theta_sampled = pyramid_sample(theta.reshaped(embedded), *sampler).values;
    if (gamma) gamma_sampled = pyramid_sample(gamma->reshaped(embedded), *sampler).values;
  }
  const Tensor& theta_anchors = theta_sampled ? *theta_sampled : theta;
  const Tensor& gamma_anchors = gamma_sampled ? *gamma_sampled : gamma ? *gamma : theta_anchors;
  timed(Phase::sampling, t0);

  const std::size_t n = qs.positions();
  const std::size_t block = std::clamp<std::size_t>(query_block == 0 ? n : query_block, 1, n);
  t0 = Clock::now();
  const Tensor phi_t = transpose2d(phi);
  timed(Phase::similarity, t0);
  t0 = Clock::now();
  const Tensor gamma_t = transpose2d(gamma_anchors);
  timed(Phase::aggregation, t0);

  // One similarity buffer and one output buffer per forward, reused by every
  // chunk; the similarity is normalized in place.
  const std::size_t anchors = theta_anchors.cols();
  Tensor aggregated = Tensor::uninitialized({n, cfg.embed_channels});
  Tensor similarity = Tensor::uninitialized({block, anchors});
  Tensor chunk = Tensor::uninitialized({block, cfg.embed_channels});
  times.similarity_bytes = similarity.bytes();
  for (std::size_t r0 = 0; r0 < n; r0 += block) {
    const std::size_t rows = std::min(block, n - r0);
    t0 = Clock::now();
    if (rows != similarity.rows()) {
      similarity = Tensor::uninitialized({rows, anchors});
      chunk = Tensor::uninitialized({rows, cfg.embed_channels});
    }
    std::optional<Tensor> query_rows;
    if (rows != n) query_rows = row_block(phi_t, r0, rows);
    matmul_into(query_rows ? *query_rows : phi_t, theta_anchors, similarity, threads);
    timed(Phase::similarity, t0);

    t0 = Clock::now();
    if (cfg.normalization == Normalization::softmax) softmax_rows_inplace(similarity);
    if (cfg.normalization == Normalization::rescale) rescale_rows_inplace(similarity);
    timed(Phase::normalization, t0);

    t0 = Clock::now();
    matmul_into(similarity, gamma_t, chunk, threads);
    std::copy(chunk.data().begin(), chunk.data().end(),
              aggregated.mutable_data().begin() + static_cast<std::ptrdiff_t>(r0 * cfg.embed_channels));
    timed(Phase::aggregation, t0);
  }

  t0 = Clock::now();
  const Tensor projected = w.out.apply(transpose2d(aggregated)).reshaped(
      {cfg.output_projection_channels(), qs.height, qs.width});
  timed(Phase::output_projection, t0);

  t0 = Clock::now();
  Tensor out = cfg.combine == Combine::residual ? add(projected, high) : concat_channels(projected, high);
  timed(Phase::combine, t0);
  return out;
}

std::uint64_t instrumented_bound_bytes(const BenchSpec& spec) {
  const std::uint64_t e = spec.cfg.embed_channels;
  const std::uint64_t n = spec.shape.positions();
  const std::uint64_t nk = spec.key_positions();
  const std::uint64_t c = spec.cfg.in_channels;
  const std::uint64_t ck = spec.cfg.key_channels();
  const std::uint64_t out = spec.cfg.output_projection_channels();
  const std::uint64_t kv = spec.cfg.share_key_value ? 1 : 2;
  const SamplerSpec* sampler = is_sampled(spec.kind) && spec.cfg.sampler ? &*spec.cfg.sampler : nullptr;
  const bool sampled = sampler && !sampler->is_identity();
  const std::uint64_t s = sampled ? anchor_count(*sampler, nk) : nk;
  const std::uint64_t block = spec.resolved_query_block();

  std::uint64_t elems = c * n + ck * nk;        // flattened inputs
  elems += e * n + kv * e * nk;                 // embeddings
  if (sampled) elems += kv * (e * nk + 3 * e * s);  // reshaped copy, per-level pools, concatenation
  elems += 2 * e * n + e * s;                   // phi^T, gamma_anchors^T, aggregated
  elems += block * e + 2 * block * s + 2 * block * e;  // query rows; similarity and chunk output, doubled
                                                     // while a short last chunk is reallocated
  elems += e * n + 2 * out * n;                 // aggregated^T, projection and its reshape
  elems += (spec.cfg.combine == Combine::concat ? out + c : c) * n;
  return elems * sizeof(double);
}

std::uint64_t required_bytes(const BenchSpec& spec) {
  const std::uint64_t e = spec.cfg.embed_channels;
  std::uint64_t inputs = spec.shape.elements() + (spec.low_shape ? spec.low_shape->elements() : 0);
  std::uint64_t weights = e * (spec.cfg.in_channels + 2 * spec.cfg.key_channels()) +
                          spec.cfg.output_projection_channels() * e + 4 * e + spec.cfg.output_projection_channels();
  return (inputs + weights) * sizeof(double) + instrumented_bound_bytes(spec);
}

std::optional<std::uint64_t> available_memory_bytes() {
  std::ifstream in("/proc/meminfo");
  std::string key;
  std::uint64_t kb = 0;
  std::string unit;
  while (in >> key >> kb >> unit) {
    if (key == "MemAvailable:") return kb * 1024;
  }
  return std::nullopt;
}

std::string cpu_model_name() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) return line.substr(line.find_first_not_of(" \t", colon + 1));
    }
  }
  return "unknown";
}

BenchReport run_bench(const BenchSpec& spec) {
  spec.validate();
  RunGuard guard;

  const Tensor high = seeded_fill(spec.shape.dims(), derive_seed(spec.seed, 1), Distribution::uniform_pm1);
  std::optional<Tensor> low;
  if (is_fusion(spec.kind)) low = seeded_fill(spec.low_shape->dims(), derive_seed(spec.seed, 2), Distribution::uniform_pm1);
  const BlockWeights w = init_weights(spec.cfg, derive_seed(spec.seed, 3));
  const Tensor* low_ptr = low ? &*low : nullptr;

  BenchReport r;
  r.kind = spec.kind;
  r.shape = spec.shape;
  r.low_shape = is_fusion(spec.kind) ? spec.low_shape : std::nullopt;
  r.embed_channels = spec.cfg.embed_channels;
  const SamplerSpec* sampler = sampler_for(spec.kind, spec.cfg);
  r.anchors = sampler ? anchor_count(*sampler, spec.key_positions()) : spec.key_positions();
  r.query_block = spec.resolved_query_block();
  r.warmup = spec.warmup;
  r.measured = spec.measured;
  r.bound_bytes = instrumented_bound_bytes(spec);
  r.cpu_model = cpu_model_name();
  r.threads = spec.threads;

  PhaseTimes times;
  for (unsigned i = 0; i < spec.warmup; ++i) {
    instrumented_forward(spec.kind, high, low_ptr, spec.cfg, w, r.query_block, spec.threads, times);
  }
  for (unsigned i = 0; i < spec.measured; ++i) {
    AllocTracker::reset_peak();
    const std::size_t baseline = AllocTracker::live();
    const auto t0 = Clock::now();
    {
      const Tensor out = instrumented_forward(spec.kind, high, low_ptr, spec.cfg, w, r.query_block, spec.threads, times);
    }
    r.total.add(elapsed_ms(t0));
    r.peak_bytes = std::max<std::uint64_t>(r.peak_bytes, AllocTracker::peak() - baseline);
    r.similarity_bytes = std::max(r.similarity_bytes, times.similarity_bytes);
    for (std::size_t p = 0; p < kPhaseCount; ++p) r.phases[p].add(times.ms[p]);
  }
  return r;
}

bool BenchReport::samples() const {
  const Shape3& keys = is_fusion(kind) && low_shape ? *low_shape : shape;
  return is_sampled(kind) && anchors != keys.positions();
}

BenchComparison compare(const BenchReport& baseline, const BenchReport& candidate) {
  if (baseline.shape != candidate.shape || baseline.low_shape != candidate.low_shape ||
      baseline.embed_channels != candidate.embed_channels) {
    throw ParameterError("compare: reports were measured on different shapes or channel counts");
  }
  auto ratio = [](double num, double den) { return num == den ? 1.0 : den > 0.0 ? num / den : 0.0; };
  BenchComparison c;
  c.baseline = std::string(to_string(baseline.kind));
  c.candidate = std::string(to_string(candidate.kind));
  c.speedup = ratio(baseline.total.mean_ms, candidate.total.mean_ms);
  c.memory_ratio = ratio(static_cast<double>(baseline.peak_bytes), static_cast<double>(candidate.peak_bytes));
  c.similarity_buffer_ratio =
      ratio(static_cast<double>(baseline.similarity_bytes), static_cast<double>(candidate.similarity_bytes));
  for (std::size_t p = 0; p < kPhaseCount; ++p) {
    if (kPhases[p] == Phase::sampling && !(baseline.samples() && candidate.samples())) continue;
    c.phase_speedup[p] = ratio(baseline.phases[p].mean_ms, candidate.phases[p].mean_ms);
  }
  return c;
}

namespace {

nlohmann::json stats_json(const PhaseStats& s) {
  return {{"samples_ms", s.samples_ms}, {"mean_ms", s.mean_ms}, {"min_ms", s.min_ms}, {"max_ms", s.max_ms}};
}

nlohmann::json shape_json(const Shape3& s) { return {{"C", s.channels}, {"H", s.height}, {"W", s.width}}; }

}  // namespace

nlohmann::json to_json(const BenchReport& r) {
  nlohmann::json phases = nlohmann::json::object();
  for (auto p : kPhases) phases[std::string(to_string(p))] = stats_json(r.phase(p));
  nlohmann::json j{{"block", to_string(r.kind)},
                   {"shape", shape_json(r.shape)},
                   {"embed_channels", r.embed_channels},
                   {"anchors", r.anchors},
                   {"query_block", r.query_block},
                   {"warmup", r.warmup},
                   {"measured", r.measured},
                   {"phases", phases},
                   {"total", stats_json(r.total)},
                   {"peak_bytes", r.peak_bytes},
                   {"similarity_bytes", r.similarity_bytes},
                   {"bound_bytes", r.bound_bytes},
                   {"environment", {{"cpu_model", r.cpu_model}, {"threads", r.threads}}}};
  if (r.low_shape) j["low_shape"] = shape_json(*r.low_shape);
  return j;
}

nlohmann::json to_json(const BenchComparison& c) {
  nlohmann::json phases = nlohmann::json::object();
  for (std::size_t p = 0; p < kPhaseCount; ++p) {
    const auto& v = c.phase_speedup[p];
    phases[std::string(to_string(kPhases[p]))] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  }
  return {{"baseline", c.baseline},
          {"candidate", c.candidate},
          {"speedup", c.speedup},
          {"memory_ratio", c.memory_ratio},
          {"similarity_buffer_ratio", c.similarity_buffer_ratio},
          {"phase_speedup", phases}};
}

std::string phase_csv(const std::vector<BenchReport>& reports) {
  std::ostringstream os;
  os << "block,phase,run,ms\n";
  for (const auto& r : reports) {
    for (auto p : kPhases) {
      const auto& samples = r.phase(p).samples_ms;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        os << to_string(r.kind) << ',' << to_string(p) << ',' << i << ',' << samples[i] << '\n';
      }
    }
    for (std::size_t i = 0; i < r.total.samples_ms.size(); ++i) {
      os << to_string(r.kind) << ",total," << i << ',' << r.total.samples_ms[i] << '\n';
    }
  }
  return os.str();
}

std::string format_table(const BenchReport& r) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%s  %zux%zux%zu  Chat=%zu  S=%zu  block=%zu\n", std::string(to_string(r.kind)).c_str(),
                r.shape.channels, r.shape.height, r.shape.width, r.embed_channels, r.anchors, r.query_block);
  os << line;
  std::snprintf(line, sizeof line, "  %-18s %12s %12s %12s\n", "phase", "mean ms", "min ms", "max ms");
  os << line;
  auto row = [&](std::string_view name, const PhaseStats& s) {
    std::snprintf(line, sizeof line, "  %-18.*s %12.3f %12.3f %12.3f\n", static_cast<int>(name.size()), name.data(),
                  s.mean_ms, s.min_ms, s.max_ms);
    os << line;
  };
  for (auto p : kPhases) row(to_string(p), r.phase(p));
  row("total", r.total);
  std::snprintf(line, sizeof line, "  peak tracked bytes %llu (bound %llu), similarity chunk bytes %llu\n",
                static_cast<unsigned long long>(r.peak_bytes), static_cast<unsigned long long>(r.bound_bytes),
                static_cast<unsigned long long>(r.similarity_bytes));
  os << line;
  return os.str();
}

std::string format_table(const BenchComparison& c) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%s vs %s: speedup %.2fx, peak memory ratio %.2fx, similarity buffer ratio %.2fx\n",
                c.baseline.c_str(), c.candidate.c_str(), c.speedup, c.memory_ratio, c.similarity_buffer_ratio);
  os << line;
  for (std::size_t p = 0; p < kPhaseCount; ++p) {
    const auto name = to_string(kPhases[p]);
    const auto& v = c.phase_speedup[p];
    if (v) {
      std::snprintf(line, sizeof line, "  %-18.*s %10.2fx\n", static_cast<int>(name.size()), name.data(), *v);
    } else {
      std::snprintf(line, sizeof line, "  %-18.*s %11s\n", static_cast<int>(name.size()), name.data(), "n/a");
    }
    os << line;
  }
  return os.str();
}

}  // namespace ann
