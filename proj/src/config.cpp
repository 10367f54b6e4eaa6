#include "ann/config.hpp"

#include <algorithm>
#include <fstream>
#include <initializer_list>
#include <string_view>

namespace ann {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& field, const std::string& what) { throw ConfigError(field + ": " + what); }

void check_keys(const json& obj, const std::string& path, std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) fail(path.empty() ? "config" : path, "must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      fail(path.empty() ? key : path + "." + key, "unknown key");
    }
  }
}

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

std::uint64_t get_uint(const json& obj, const std::string& path, const std::string& key, std::uint64_t min_value) {
  const json& v = obj.at(key);
  if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
    fail(join(path, key), "must be a non-negative integer");
  }
  const auto value = v.get<std::uint64_t>();
  if (value < min_value) fail(join(path, key), "must be >= " + std::to_string(min_value));
  return value;
}

bool get_bool(const json& obj, const std::string& path, const std::string& key) {
  if (!obj.at(key).is_boolean()) fail(join(path, key), "must be true or false");
  return obj.at(key).get<bool>();
}

std::string get_string(const json& obj, const std::string& path, const std::string& key) {
  if (!obj.at(key).is_string()) fail(join(path, key), "must be a string");
  return obj.at(key).get<std::string>();
}

BlockKind parse_kind(const std::string& name, const std::string& field) {
  auto k = parse_block_kind(name);
  if (!k) fail(field, "unknown block '" + name + "' (expected nb, apnb, fnb or afnb)");
  return *k;
}

std::vector<BlockKind> parse_kinds(const json& obj, const std::string& path, const std::string& key) {
  const json& v = obj.at(key);
  const std::string field = join(path, key);
  if (!v.is_array() || v.empty()) fail(field, "must be a nonempty list of block names");
  std::vector<BlockKind> kinds;
  for (const auto& item : v) {
    if (!item.is_string()) fail(field, "entries must be block names");
    kinds.push_back(parse_kind(item.get<std::string>(), field));
  }
  return kinds;
}

Shape3 parse_shape(const json& obj, const std::string& path, bool need_channels) {
  check_keys(obj, path, {"C", "H", "W"});
  Shape3 s;
  for (const char* key : {"H", "W"}) {
    if (!obj.contains(key)) fail(join(path, key), "is required");
  }
  if (need_channels && !obj.contains("C")) fail(join(path, "C"), "is required");
  if (obj.contains("C")) s.channels = get_uint(obj, path, "C", 1);
  s.height = get_uint(obj, path, "H", 1);
  s.width = get_uint(obj, path, "W", 1);
  return s;
}

SamplerSpec parse_sampler(const json& obj, const std::string& path) {
  check_keys(obj, path, {"method", "levels", "seed"});
  SamplerSpec spec;
  if (!obj.contains("method")) fail(join(path, "method"), "is required");
  const std::string method = get_string(obj, path, "method");
  auto m = parse_sample_method(method);
  if (!m) fail(join(path, "method"), "unknown sampling method '" + method + "'");
  spec.method = *m;
  spec.levels.clear();
  if (obj.contains("levels")) {
    const json& lv = obj.at("levels");
    if (!lv.is_array()) fail(join(path, "levels"), "must be a list of output sizes");
    for (const auto& n : lv) {
      if (!n.is_number_integer() || n.get<std::int64_t>() < 1) fail(join(path, "levels"), "entries must be integers >= 1");
      spec.levels.push_back(n.get<std::size_t>());
    }
  }
  if (obj.contains("seed")) spec.seed = get_uint(obj, path, "seed", 0);
  if (!spec.is_identity()) {
    if (spec.levels.empty()) fail(join(path, "levels"), "must be nonempty for method " + method);
    if (!spec.is_pyramid() && spec.levels.size() != 1) {
      fail(join(path, "levels"), "flat method " + method + " takes exactly one size");
    }
  }
  return spec;
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
  check_keys(j, "", {"block", "shape", "low_shape", "embed_channels", "out_channels", "normalization", "combine",
                     "share_key_value", "bias", "sampler", "seed", "output", "element_bytes", "bench", "sweep",
                     "equivalence", "gradcheck"});
  ExperimentConfig c;
  if (j.contains("block")) c.block = parse_kind(get_string(j, "", "block"), "block");
  if (j.contains("shape")) c.shape = parse_shape(j.at("shape"), "shape", true);
  if (j.contains("low_shape")) c.low_shape = parse_shape(j.at("low_shape"), "low_shape", true);
  if (is_fusion(c.block) && !c.low_shape) fail("low_shape", "is required for block " + std::string(to_string(c.block)));

  BlockConfig& b = c.block_config;
  b.in_channels = c.shape.channels;
  if (c.low_shape) b.low_channels = c.low_shape->channels;
  b.embed_channels = j.contains("embed_channels") ? get_uint(j, "", "embed_channels", 1)
                                                  : std::max<std::size_t>(1, c.shape.channels / 2);
  if (j.contains("out_channels")) b.out_channels = get_uint(j, "", "out_channels", 1);
  if (j.contains("normalization")) {
    const std::string n = get_string(j, "", "normalization");
    auto v = parse_normalization(n);
    if (!v) fail("normalization", "unknown normalization '" + n + "' (expected softmax, rescale or none)");
    b.normalization = *v;
  }
  if (j.contains("combine")) {
    const std::string n = get_string(j, "", "combine");
    auto v = parse_combine(n);
    if (!v) fail("combine", "unknown combine mode '" + n + "' (expected residual or concat)");
    b.combine = *v;
  }
  if (j.contains("share_key_value")) b.share_key_value = get_bool(j, "", "share_key_value");
  if (j.contains("bias")) b.bias = get_bool(j, "", "bias");
  if (j.contains("sampler")) {
    b.sampler = parse_sampler(j.at("sampler"), "sampler");
  } else if (is_sampled(c.block)) {
    b.sampler = SamplerSpec::pyramid_average({1, 3, 6, 8});
  }
  if (b.combine == Combine::residual && b.output_projection_channels() != b.in_channels) {
    fail("out_channels", "residual combine requires out_channels == shape.C");
  }

  if (j.contains("seed")) c.seed = get_uint(j, "", "seed", 0);
  if (j.contains("output")) c.output = get_string(j, "", "output");
  if (j.contains("element_bytes")) c.element_bytes = get_uint(j, "", "element_bytes", 1);

  if (j.contains("bench")) {
    const json& o = j.at("bench");
    check_keys(o, "bench", {"warmup", "measured", "blocks", "threads", "query_block", "memory_budget_mb", "csv"});
    if (o.contains("warmup")) c.bench.warmup = static_cast<unsigned>(get_uint(o, "bench", "warmup", 1));
    if (o.contains("measured")) c.bench.measured = static_cast<unsigned>(get_uint(o, "bench", "measured", 3));
    if (o.contains("blocks")) c.bench.blocks = parse_kinds(o, "bench", "blocks");
    if (o.contains("threads")) c.bench.threads = static_cast<unsigned>(get_uint(o, "bench", "threads", 1));
    if (o.contains("query_block")) c.bench.query_block = get_uint(o, "bench", "query_block", 0);
    if (o.contains("memory_budget_mb")) c.bench.memory_budget_mb = get_uint(o, "bench", "memory_budget_mb", 1);
    if (o.contains("csv")) c.bench.csv = get_string(o, "bench", "csv");
    for (auto k : c.bench.blocks) {
      if (is_fusion(k) && !c.low_shape) fail("bench.blocks", "fusion blocks need low_shape");
    }
  }
  if (j.contains("sweep")) {
    const json& o = j.at("sweep");
    check_keys(o, "sweep", {"shapes", "blocks"});
    if (o.contains("shapes")) {
      const json& shapes = o.at("shapes");
      if (!shapes.is_array() || shapes.empty()) fail("sweep.shapes", "must be a nonempty list of shapes");
      for (std::size_t i = 0; i < shapes.size(); ++i) {
        c.sweep.shapes.push_back(parse_shape(shapes[i], "sweep.shapes[" + std::to_string(i) + "]", false));
      }
    }
    if (o.contains("blocks")) c.sweep.blocks = parse_kinds(o, "sweep", "blocks");
  }
  if (j.contains("equivalence")) {
    const json& o = j.at("equivalence");
    check_keys(o, "equivalence", {"cases", "corrupt"});
    if (o.contains("cases")) c.equivalence.cases = get_uint(o, "equivalence", "cases", 1);
    if (o.contains("corrupt")) c.equivalence.corrupt = get_bool(o, "equivalence", "corrupt");
  }
  if (j.contains("gradcheck")) {
    const json& o = j.at("gradcheck");
    check_keys(o, "gradcheck", {"eps"});
    if (o.contains("eps")) {
      if (!o.at("eps").is_number() || !(o.at("eps").get<double>() > 0.0)) fail("gradcheck.eps", "must be a positive number");
      c.gradcheck_eps = o.at("eps").get<double>();
    }
  }

  if (c.bench.blocks.empty()) {
    c.bench.blocks = is_fusion(c.block) ? std::vector{BlockKind::fnb, BlockKind::afnb}
                                        : std::vector{BlockKind::nb, BlockKind::apnb};
  }
  auto any_sampled = [](const std::vector<BlockKind>& kinds) { return std::any_of(kinds.begin(), kinds.end(), is_sampled); };
  if (!b.sampler && (any_sampled(c.bench.blocks) || any_sampled(c.sweep.blocks))) {
    b.sampler = SamplerSpec::pyramid_average({1, 3, 6, 8});
  }

  try {
    b.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("block config: ") + e.what());
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config: invalid JSON in " + path.string() + ": " + e.what());
  }
  return parse_config(j);
}

}  // namespace ann
