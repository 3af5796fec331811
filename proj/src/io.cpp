// SPDX-License-Identifier: Apache-2.0
#include "prumux/io.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <system_error>

#include "json.hpp"

#include "prumux/error.hpp"

namespace prumux {

using nlohmann::json;

std::string format_number(double v) {
  require(std::isfinite(v), ErrorKind::kDomain, "cannot format a non-finite number");
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_number(std::string_view text) {
  double v = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  const auto res = std::from_chars(first, last, v);
  require(!text.empty() && res.ec == std::errc() && res.ptr == last && std::isfinite(v), ErrorKind::kParse,
          "'" + std::string(text) + "' is not a decimal number");
  return v;
}

// Files ----------------------------------------------------------------------

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::kIo, "cannot write '" + tmp + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    require(static_cast<bool>(out), ErrorKind::kIo, "write to '" + tmp + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, ErrorKind::kIo, "cannot move '" + tmp + "' to '" + path + "': " + ec.message());
}

// Measurements -------------------------------------------------------------

namespace {

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

std::size_t parse_count(std::string_view text) {
  std::size_t v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  require(!text.empty() && res.ec == std::errc() && res.ptr == text.data() + text.size(), ErrorKind::kParse,
          "'" + std::string(text) + "' is not a non-negative integer");
  return v;
}

}  // namespace

std::vector<MeasurementRecord> parse_measurements(std::string_view text) {
  std::vector<MeasurementRecord> records;
  std::size_t line_no = 0;
  bool header_seen = false;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (!header_seen) {
      require(line == kMeasurementHeader, ErrorKind::kParse,
              where + "header must be exactly '" + std::string(kMeasurementHeader) + "'");
      header_seen = true;
      continue;
    }
    if (line.empty()) continue;
    const auto fields = split(line, ',');
    require(fields.size() == 5, ErrorKind::kParse, where + "expected 5 fields, got " + std::to_string(fields.size()));
    MeasurementRecord r;
    try {
      r.task = std::string(fields[0]);
      r.n = parse_count(fields[1]);
      r.sparsity = parse_number(fields[2]);
      r.accuracy = parse_number(fields[3]);
      r.throughput = parse_number(fields[4]);
      records.push_back(r);
      validate(std::span<const MeasurementRecord>(records));
    } catch (const Error& e) {
      fail(ErrorKind::kParse, where + e.what());
    }
  }
  require(header_seen, ErrorKind::kParse, "line 1: missing header");
  return records;
}

std::string measurements_to_csv(const std::vector<MeasurementRecord>& records) {
  std::string out(kMeasurementHeader);
  out += '\n';
  for (const auto& r : records) {
    out += r.task + "," + std::to_string(r.n) + "," + format_number(r.sparsity) + "," + format_number(r.accuracy) +
           "," + format_number(r.throughput) + "\n";
  }
  return out;
}

std::vector<MeasurementRecord> load_measurements(const std::string& path) {
  return parse_measurements(read_file(path));
}

void save_measurements(const std::string& path, const std::vector<MeasurementRecord>& records) {
  validate(std::span<const MeasurementRecord>(records));
  write_file(path, measurements_to_csv(records));
}

// JSON helpers ----------------------------------------------------------------

namespace {

json parse_json(std::string_view text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, what + ": " + e.what());
  }
}

void check_version(const json& j, const std::string& what) {
  require(j.is_object() && j.contains("format_version"), ErrorKind::kFormatVersion, what + " has no format_version");
  const json& v = j.at("format_version");
  require(v.is_number_integer() && v.get<int>() == kFormatVersion, ErrorKind::kFormatVersion,
          what + " format_version " + v.dump() + " is not supported (expected " + std::to_string(kFormatVersion) +
              ")");
}

// Wraps nlohmann access errors into kParse.
template <typename F>
auto guarded(const std::string& what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, what + ": " + e.what());
  }
}

json matrix_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.values().begin(), m.values().end())}};
}

Matrix matrix_from(const json& j) {
  const auto rows = j.at("rows").get<std::size_t>();
  const auto cols = j.at("cols").get<std::size_t>();
  auto data = j.at("data").get<Vector>();
  require(data.size() == rows * cols, ErrorKind::kParse, "matrix data length does not match rows*cols");
  if (rows * cols == 0) return Matrix(rows, cols);
  return Matrix(rows, cols, std::move(data));
}

json affine_json(const AffineMap& a) { return {{"weight", matrix_json(a.weight)}, {"bias", a.bias}}; }

AffineMap affine_from(const json& j) { return {matrix_from(j.at("weight")), j.at("bias").get<Vector>()}; }

std::string kind_name(DemuxKind k) { return k == DemuxKind::kAffine ? "affine" : "mlp"; }

DemuxKind kind_from(const std::string& s) {
  if (s == "affine") return DemuxKind::kAffine;
  if (s == "mlp") return DemuxKind::kMlp;
  fail(ErrorKind::kParse, "unknown demux kind '" + s + "'");
}

std::string rule_name(LabelRule r) { return r == LabelRule::kLinearThreshold ? "linear" : "first_token"; }

LabelRule rule_from(const std::string& s) {
  if (s == "linear") return LabelRule::kLinearThreshold;
  if (s == "first_token") return LabelRule::kFirstToken;
  fail(ErrorKind::kParse, "unknown label rule '" + s + "'");
}

json layer_json(const EncoderLayer& l) {
  return {{"has_mha", l.has_mha},       {"has_ffn", l.has_ffn},       {"heads", l.heads},
          {"ln1_gamma", l.ln1_gamma},   {"ln1_beta", l.ln1_beta},     {"wq", matrix_json(l.wq)},
          {"wk", matrix_json(l.wk)},    {"wv", matrix_json(l.wv)},    {"bq", l.bq},
          {"bk", l.bk},                 {"bv", l.bv},                 {"wo", matrix_json(l.wo)},
          {"bo", l.bo},                 {"ln2_gamma", l.ln2_gamma},   {"ln2_beta", l.ln2_beta},
          {"w1", matrix_json(l.w1)},    {"b1", l.b1},                 {"w2", matrix_json(l.w2)},
          {"b2", l.b2}};
}

EncoderLayer layer_from(const json& j) {
  EncoderLayer l;
  l.has_mha = j.at("has_mha").get<bool>();
  l.has_ffn = j.at("has_ffn").get<bool>();
  l.heads = j.at("heads").get<std::size_t>();
  l.ln1_gamma = j.at("ln1_gamma").get<Vector>();
  l.ln1_beta = j.at("ln1_beta").get<Vector>();
  l.wq = matrix_from(j.at("wq"));
  l.wk = matrix_from(j.at("wk"));
  l.wv = matrix_from(j.at("wv"));
  l.bq = j.at("bq").get<Vector>();
  l.bk = j.at("bk").get<Vector>();
  l.bv = j.at("bv").get<Vector>();
  l.wo = matrix_from(j.at("wo"));
  l.bo = j.at("bo").get<Vector>();
  l.ln2_gamma = j.at("ln2_gamma").get<Vector>();
  l.ln2_beta = j.at("ln2_beta").get<Vector>();
  l.w1 = matrix_from(j.at("w1"));
  l.b1 = j.at("b1").get<Vector>();
  l.w2 = matrix_from(j.at("w2"));
  l.b2 = j.at("b2").get<Vector>();
  return l;
}

json model_json(const EncoderModel& m) {
  json layers = json::array();
  for (const auto& l : m.layers) layers.push_back(layer_json(l));
  return {{"hidden", m.hidden},
          {"head_dim", m.head_dim},
          {"layers", layers},
          {"classifier", matrix_json(m.classifier)},
          {"classifier_bias", m.classifier_bias},
          {"vocab_proj", matrix_json(m.vocab_proj)},
          {"vocab_bias", m.vocab_bias}};
}

EncoderModel model_from(const json& j) {
  EncoderModel m;
  m.hidden = j.at("hidden").get<std::size_t>();
  m.head_dim = j.at("head_dim").get<std::size_t>();
  for (const auto& l : j.at("layers")) m.layers.push_back(layer_from(l));
  m.classifier = matrix_from(j.at("classifier"));
  m.classifier_bias = j.at("classifier_bias").get<Vector>();
  m.vocab_proj = matrix_from(j.at("vocab_proj"));
  m.vocab_bias = j.at("vocab_bias").get<Vector>();
  return m;
}

json kit_json(const MuxKit& k) {
  json demux = json::array();
  for (const auto& d : k.demux) {
    json e = {{"first", affine_json(d.first)}};
    if (d.second) e["second"] = affine_json(*d.second);
    demux.push_back(e);
  }
  return {{"width", k.width},   {"seed", k.seed.seed},          {"kind", kind_name(k.kind)},
          {"keys", k.keys},     {"input_coords", k.input_coords}, {"demux", demux}};
}

MuxKit kit_from(const json& j) {
  MuxKit k;
  k.width = j.at("width").get<std::size_t>();
  k.seed = RngKey{j.at("seed").get<std::uint64_t>()};
  k.kind = kind_from(j.at("kind").get<std::string>());
  k.keys = j.at("keys").get<std::vector<Vector>>();
  k.input_coords = j.at("input_coords").get<std::vector<std::size_t>>();
  for (const auto& e : j.at("demux")) {
    DemuxFn d;
    d.first = affine_from(e.at("first"));
    if (e.contains("second")) d.second = affine_from(e.at("second"));
    k.demux.push_back(std::move(d));
  }
  return k;
}

json masks_json(const std::vector<Mask>& m) {
  json out = json::array();
  for (const auto& v : m) out.push_back(std::vector<int>(v.begin(), v.end()));
  return out;
}

Mask mask_from(const json& j) {
  Mask out;
  for (const auto& b : j) {
    const int v = b.get<int>();
    require(v == 0 || v == 1, ErrorKind::kParse, "mask bits must be 0 or 1");
    out.push_back(static_cast<std::uint8_t>(v));
  }
  return out;
}

std::vector<Mask> masks_from(const json& j) {
  std::vector<Mask> out;
  for (const auto& m : j) out.push_back(mask_from(m));
  return out;
}

json spec_json(const SparsitySpec& s) {
  return {{"heads", masks_json(s.heads)},
          {"mha", std::vector<int>(s.mha.begin(), s.mha.end())},
          {"ffn", std::vector<int>(s.ffn.begin(), s.ffn.end())},
          {"hidden", std::vector<int>(s.hidden.begin(), s.hidden.end())},
          {"intermediate", masks_json(s.intermediate)}};
}

SparsitySpec spec_from(const json& j) {
  SparsitySpec s;
  s.heads = masks_from(j.at("heads"));
  s.mha = mask_from(j.at("mha"));
  s.ffn = mask_from(j.at("ffn"));
  s.hidden = mask_from(j.at("hidden"));
  s.intermediate = masks_from(j.at("intermediate"));
  return s;
}

MaskScores scores_from(const json& j) {
  MaskScores s;
  s.heads = j.at("heads").get<std::vector<Vector>>();
  s.mha = j.at("mha").get<Vector>();
  s.ffn = j.at("ffn").get<Vector>();
  s.hidden = j.at("hidden").get<Vector>();
  s.intermediate = j.at("intermediate").get<std::vector<Vector>>();
  s.threshold = j.value("threshold", 0.5);
  return s;
}

json config_json(const RunConfig& c) {
  return {
      {"seed", c.seed.seed},
      {"task",
       {{"vocab", c.task.vocab},
        {"length", c.task.length},
        {"classes", c.task.classes},
        {"width", c.task.width},
        {"train_count", c.task.train_count},
        {"eval_count", c.task.eval_count},
        {"dim", c.task.dim},
        {"rule", rule_name(c.task.rule)},
        {"min_margin", c.task.min_margin}}},
      {"encoder",
       {{"layers", c.encoder.layers},
        {"heads", c.encoder.heads},
        {"hidden", c.encoder.hidden},
        {"ff", c.encoder.ff},
        {"classes", c.encoder.classes},
        {"vocab", c.encoder.vocab}}},
      {"kit", {{"kind", kind_name(c.kit.kind)}, {"demux_init_noise", c.kit.demux_init_noise}}},
      {"train",
       {{"learning_rate", c.train.learning_rate},
        {"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"seed", c.train.seed.seed},
        {"max_grad_norm", c.train.max_grad_norm}}},
      {"distill",
       {{"layer", c.distill.layer}, {"ce", c.distill.ce}, {"temperature", c.distill.temperature}}},
      {"prune_sparsity", c.prune_sparsity},
  };
}

// Missing keys keep their defaults so config files may be partial.
RunConfig config_from(const json& j) {
  RunConfig c;
  c.seed = RngKey{j.value("seed", c.seed.seed)};
  if (j.contains("task")) {
    const json& t = j.at("task");
    c.task.vocab = t.value("vocab", c.task.vocab);
    c.task.length = t.value("length", c.task.length);
    c.task.classes = t.value("classes", c.task.classes);
    c.task.width = t.value("width", c.task.width);
    c.task.train_count = t.value("train_count", c.task.train_count);
    c.task.eval_count = t.value("eval_count", c.task.eval_count);
    c.task.dim = t.value("dim", c.task.dim);
    if (t.contains("rule")) c.task.rule = rule_from(t.at("rule").get<std::string>());
    c.task.min_margin = t.value("min_margin", c.task.min_margin);
  }
  if (j.contains("encoder")) {
    const json& e = j.at("encoder");
    c.encoder.layers = e.value("layers", c.encoder.layers);
    c.encoder.heads = e.value("heads", c.encoder.heads);
    c.encoder.hidden = e.value("hidden", c.encoder.hidden);
    c.encoder.ff = e.value("ff", c.encoder.ff);
    c.encoder.classes = e.value("classes", c.encoder.classes);
    c.encoder.vocab = e.value("vocab", c.encoder.vocab);
  }
  if (j.contains("kit")) {
    const json& k = j.at("kit");
    if (k.contains("kind")) c.kit.kind = kind_from(k.at("kind").get<std::string>());
    c.kit.demux_init_noise = k.value("demux_init_noise", c.kit.demux_init_noise);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
    c.train.epochs = t.value("epochs", c.train.epochs);
    c.train.batch_size = t.value("batch_size", c.train.batch_size);
    c.train.seed = RngKey{t.value("seed", c.train.seed.seed)};
    c.train.max_grad_norm = t.value("max_grad_norm", c.train.max_grad_norm);
  }
  if (j.contains("distill")) {
    const json& d = j.at("distill");
    c.distill.layer = d.value("layer", c.distill.layer);
    c.distill.ce = d.value("ce", c.distill.ce);
    c.distill.temperature = d.value("temperature", c.distill.temperature);
  }
  c.prune_sparsity = j.value("prune_sparsity", c.prune_sparsity);
  return c;
}

}  // namespace

// Run configuration ---------------------------------------------------------

RunConfig parse_run_config(std::string_view json_text) {
  const json j = parse_json(json_text, "run config");
  check_version(j, "run config");
  RunConfig c = guarded("run config", [&] { return config_from(j); });
  validate(c.train);
  validate(c.distill);
  return c;
}

std::string run_config_to_json(const RunConfig& cfg) {
  json j = config_json(cfg);
  j["format_version"] = kFormatVersion;
  return j.dump(2) + "\n";
}

RunConfig load_run_config(const std::string& path) { return parse_run_config(read_file(path)); }

// Bundles -------------------------------------------------------------------

void validate(const ModelBundle& b) {
  validate(b.model);
  validate(b.kit);
  require(b.kit.input_dim() == b.model.hidden && b.kit.demux_in_dim() == b.model.hidden &&
              b.kit.demux_out_dim() == b.model.hidden,
          ErrorKind::kShape, "kit dimensions do not match the model hidden size");
  if (b.spec) {
    const ModelShape dense = shape_from_spec(*b.spec, b.model.head_dim);
    require(dense.layers.size() == b.model.layers.size(), ErrorKind::kShape, "spec layer count does not match");
    require(count_live(b.spec->hidden) == b.model.hidden, ErrorKind::kShape, "spec hidden mask does not match");
  }
}

std::string bundle_to_json(const ModelBundle& b) {
  validate(b);
  json history = json::array();
  for (const auto& h : b.history)
    history.push_back({{"phase", h.phase},
                       {"epochs", h.epochs},
                       {"final_loss", h.final_loss},
                       {"final_accuracy", h.final_accuracy}});
  json j = {{"format_version", kFormatVersion},
            {"model", model_json(b.model)},
            {"kit", kit_json(b.kit)},
            {"spec", b.spec ? spec_json(*b.spec) : json(nullptr)},
            {"provenance", {{"seed", b.config.seed.seed}, {"config", config_json(b.config)}, {"history", history}}}};
  return j.dump(1) + "\n";
}

ModelBundle parse_bundle(std::string_view json_text) {
  const json j = parse_json(json_text, "bundle");
  check_version(j, "bundle");
  ModelBundle b = guarded("bundle", [&] {
    ModelBundle out;
    out.model = model_from(j.at("model"));
    out.kit = kit_from(j.at("kit"));
    if (!j.at("spec").is_null()) out.spec = spec_from(j.at("spec"));
    const json& p = j.at("provenance");
    out.config = config_from(p.at("config"));
    for (const auto& h : p.at("history"))
      out.history.push_back({h.at("phase").get<std::string>(), h.at("epochs").get<std::size_t>(),
                             h.at("final_loss").get<double>(), h.at("final_accuracy").get<double>()});
    return out;
  });
  try {
    validate(b);
  } catch (const Error& e) {
    fail(ErrorKind::kParse, std::string("bundle is inconsistent: ") + e.what());
  }
  return b;
}

void save_bundle(const std::string& path, const ModelBundle& bundle) { write_file(path, bundle_to_json(bundle)); }

ModelBundle load_bundle(const std::string& path) { return parse_bundle(read_file(path)); }

// Sparsity specs --------------------------------------------------------------

SparsitySpec parse_spec_request(std::string_view json_text, const ModelShape& dense_shape) {
  const json j = parse_json(json_text, "spec");
  check_version(j, "spec");
  SparsitySpec spec = guarded("spec", [&] {
    if (j.contains("spec")) return canonicalize(spec_from(j.at("spec")));
    if (j.contains("scores")) return threshold_masks(scores_from(j.at("scores")));
    if (j.contains("target_sparsity")) return spec_for_sparsity(dense_shape, j.at("target_sparsity").get<double>());
    fail(ErrorKind::kParse, "spec file needs one of 'spec', 'scores' or 'target_sparsity'");
  });
  check_matches(spec, dense_shape);
  return spec;
}

std::string spec_to_json(const SparsitySpec& spec) {
  json j = {{"format_version", kFormatVersion}, {"spec", spec_json(spec)}};
  return j.dump(1) + "\n";
}

SparsitySpec load_spec_request(const std::string& path, const ModelShape& dense_shape) {
  return parse_spec_request(read_file(path), dense_shape);
}

// Planner models ------------------------------------------------------------

std::string planner_to_json(const PlannerModel& model) {
  json table = json::array();
  for (const auto& [c, v] : model.throughput.table)
    table.push_back({{"n", c.n}, {"sparsity", c.sparsity}, {"throughput", v}});
  json tasks = json::array();
  for (const auto& [name, acc] : model.tasks) {
    json grid = json::array();
    for (std::size_t i = 0; i < acc.grid().rows(); ++i) {
      const auto r = acc.grid().row(i);
      grid.push_back(std::vector<double>(r.begin(), r.end()));
    }
    tasks.push_back({{"task", name}, {"widths", acc.widths()}, {"sparsities", acc.sparsities()}, {"grid", grid}});
  }
  json j = {{"format_version", kFormatVersion},
            {"reference_task", model.throughput.reference_task},
            {"throughput", table},
            {"accuracy", tasks}};
  return j.dump(2) + "\n";
}

PlannerModel parse_planner(std::string_view json_text) {
  const json j = parse_json(json_text, "planner model");
  check_version(j, "planner model");
  return guarded("planner model", [&] {
    PlannerModel m;
    m.throughput.reference_task = j.at("reference_task").get<std::string>();
    for (const auto& row : j.at("throughput")) {
      const Candidate c{row.at("n").get<std::size_t>(), row.at("sparsity").get<double>()};
      require(m.throughput.table.emplace(c, row.at("throughput").get<double>()).second, ErrorKind::kParse,
              "duplicate throughput entry");
    }
    for (const auto& t : j.at("accuracy")) {
      Vector widths = t.at("widths").get<Vector>();
      Vector sparsities = t.at("sparsities").get<Vector>();
      const auto rows = t.at("grid").get<std::vector<Vector>>();
      require(rows.size() == widths.size(), ErrorKind::kParse, "grid row count does not match widths");
      Matrix grid(widths.size(), sparsities.size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        require(rows[i].size() == sparsities.size(), ErrorKind::kParse, "grid row length does not match sparsities");
        for (std::size_t k = 0; k < rows[i].size(); ++k) grid(i, k) = rows[i][k];
      }
      m.tasks.emplace(t.at("task").get<std::string>(),
                      AccuracyModel(std::move(widths), std::move(sparsities), std::move(grid)));
    }
    return m;
  });
}

void save_planner(const std::string& path, const PlannerModel& model) { write_file(path, planner_to_json(model)); }

PlannerModel load_planner(const std::string& path) { return parse_planner(read_file(path)); }

}  // namespace prumux
