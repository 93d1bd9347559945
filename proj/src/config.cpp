// SPDX-License-Identifier: Apache-2.0
#include "gkd/config.hpp"

#include <charconv>
#include <climits>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace gkd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string part;
  while (std::getline(is, part, sep)) out.push_back(trim(part));
  if (!s.empty() && s.back() == sep) out.push_back("");
  return out;
}

long long parse_ll(const std::string& v) {
  std::size_t pos = 0;
  long long out = std::stoll(v, &pos);
  if (pos != v.size()) throw ConfigError("trailing characters after integer");
  return out;
}

int parse_int(const std::string& v) {
  const long long out = parse_ll(v);
  if (out < INT_MIN || out > INT_MAX) throw ConfigError("integer out of range");
  return static_cast<int>(out);
}

std::uint64_t parse_u64(const std::string& v) {
  if (!v.empty() && v[0] == '-') throw ConfigError("seed must be non-negative");
  std::size_t pos = 0;
  const std::uint64_t out = std::stoull(v, &pos);
  if (pos != v.size()) throw ConfigError("trailing characters after integer");
  return out;
}

double parse_double(const std::string& v) {
  std::size_t pos = 0;
  const double out = std::stod(v, &pos);
  if (pos != v.size()) throw ConfigError("trailing characters after number");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("expected true or false");
}

std::vector<int> parse_int_list(const std::string& v) {
  std::vector<int> out;
  for (const std::string& part : split(v, ',')) out.push_back(parse_int(part));
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

std::vector<synth::Tactic> parse_tactics(const std::string& v) {
  std::vector<synth::Tactic> out;
  for (const std::string& part : split(v, ','))
    out.push_back(synth::tactic_from_string(part));
  return out;
}

std::string fmt(double v) {
  char buf[48];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string fmt(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

std::string fmt(const std::vector<synth::Tactic>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += synth::to_string(v[i]);
  }
  return out;
}

}  // namespace

void Config::set(const std::string& key, const std::string& value) {
  try {
    if (key == "data.size")
      data.size = parse_int(value);
    else if (key == "data.n_train")
      data.n_train = parse_int(value);
    else if (key == "data.n_test")
      data.n_test = parse_int(value);
    else if (key == "data.seed_a")
      data.seed_a = parse_u64(value);
    else if (key == "data.seed_b")
      data.seed_b = parse_u64(value);
    else if (key == "data.gap_threshold")
      data.gap_threshold = parse_double(value);
    else if (key == "domain_a.shape")
      data.domain_a.shape_family = synth::shape_family_from_string(value);
    else if (key == "domain_a.texture")
      data.domain_a.texture = synth::texture_from_string(value);
    else if (key == "domain_a.fg_mean")
      data.domain_a.intensity.fg_mean = parse_double(value);
    else if (key == "domain_a.bg_mean")
      data.domain_a.intensity.bg_mean = parse_double(value);
    else if (key == "domain_a.noise_sigma")
      data.domain_a.intensity.noise_sigma = parse_double(value);
    else if (key == "domain_b.shape")
      data.domain_b.shape_family = synth::shape_family_from_string(value);
    else if (key == "domain_b.texture")
      data.domain_b.texture = synth::texture_from_string(value);
    else if (key == "domain_b.fg_mean")
      data.domain_b.intensity.fg_mean = parse_double(value);
    else if (key == "domain_b.bg_mean")
      data.domain_b.intensity.bg_mean = parse_double(value);
    else if (key == "domain_b.noise_sigma")
      data.domain_b.intensity.noise_sigma = parse_double(value);
    else if (key == "net.latent_dim")
      latent_dim = parse_int(value);
    else if (key == "net.teacher_widths")
      teacher_widths = parse_int_list(value);
    else if (key == "net.student_widths")
      student_widths = parse_int_list(value);
    else if (key == "train.batch_size")
      train.batch_size = parse_int(value);
    else if (key == "train.lr")
      train.lr = parse_double(value);
    else if (key == "train.epochs_p1")
      train.epochs_p1 = parse_int(value);
    else if (key == "train.epochs_p2")
      train.epochs_p2 = parse_int(value);
    else if (key == "train.epochs_p3")
      train.epochs_p3 = parse_int(value);
    else if (key == "train.epochs_p4")
      train.epochs_p4 = parse_int(value);
    else if (key == "train.tactics")
      train.tactics = parse_tactics(value);
    else if (key == "train.seed")
      train.seed = parse_u64(value);
    else if (key == "train.warm_start_student")
      train.warm_start_student = parse_bool(value);
    else if (key == "graph.node_mode")
      node_mode = graphs::intra_node_mode_from_string(value);
    else if (key == "loss.lambda")
      loss.lambda_msan = parse_double(value);
    else if (key == "loss.alpha")
      loss.alpha = parse_double(value);
    else if (key == "loss.beta")
      loss.beta = parse_double(value);
    else if (key == "loss.gamma")
      loss.gamma = parse_double(value);
    else if (key == "eval.threshold")
      eval.threshold = parse_double(value);
    else if (key == "fsd.epsilon")
      eval.fsd_epsilon = parse_double(value);
    else
      throw ConfigError("unknown configuration key '" + key + "'");
  } catch (const ConfigError& e) {
    if (std::string(e.what()).find("unknown configuration key") == 0) throw;
    throw ConfigError("config: " + key + " = '" + value + "': " + e.what());
  } catch (const std::exception& e) {
    throw ConfigError("config: " + key + " = '" + value + "': " + e.what());
  }
}

void Config::validate() const {
  check_param(data.size >= 32, "config: data.size too small");
  check_param(data.n_train >= 1 && data.n_test >= 2,
              "config: dataset split sizes too small");
  check_param(data.gap_threshold >= 0.0,
              "config: data.gap_threshold must be non-negative");
  data.domain_a.validate();
  data.domain_b.validate();
  net_config().validate();
  loss.validate();
  check_param(train.batch_size >= 1, "config: train.batch_size too small");
  check_param(train.batch_size <= data.n_train,
              "config: train.batch_size exceeds the training split");
  check_param(train.lr > 0.0, "config: train.lr must be positive");
  check_param(train.epochs_p1 >= 1 && train.epochs_p2 >= 1 &&
                  train.epochs_p3 >= 1 && train.epochs_p4 >= 1,
              "config: every phase needs at least one epoch");
  check_param(train.tactics.size() >= 2,
              "config: need at least two appearance tactics");
  check_param(eval.threshold > 0.0 && eval.threshold < 1.0,
              "config: eval.threshold must lie strictly inside (0,1)");
  check_param(eval.fsd_epsilon > 0.0,
              "config: fsd.epsilon must be positive");
  check_param(data.n_test >= latent_dim + 1,
              "config: data.n_test must exceed net.latent_dim for the "
              "distribution distance to be defined");
}

nets::NetConfig Config::net_config() const {
  nets::NetConfig net;
  net.input_size = data.size;
  net.latent_dim = latent_dim;
  net.teacher_widths = teacher_widths;
  net.student_widths = student_widths;
  return net;
}

std::string Config::to_text() const {
  std::ostringstream os;
  os << "data.size = " << data.size << '\n';
  os << "data.n_train = " << data.n_train << '\n';
  os << "data.n_test = " << data.n_test << '\n';
  os << "data.seed_a = " << data.seed_a << '\n';
  os << "data.seed_b = " << data.seed_b << '\n';
  os << "data.gap_threshold = " << fmt(data.gap_threshold) << '\n';
  os << "domain_a.shape = " << synth::to_string(data.domain_a.shape_family)
     << '\n';
  os << "domain_a.texture = " << synth::to_string(data.domain_a.texture)
     << '\n';
  os << "domain_a.fg_mean = " << fmt(data.domain_a.intensity.fg_mean) << '\n';
  os << "domain_a.bg_mean = " << fmt(data.domain_a.intensity.bg_mean) << '\n';
  os << "domain_a.noise_sigma = " << fmt(data.domain_a.intensity.noise_sigma)
     << '\n';
  os << "domain_b.shape = " << synth::to_string(data.domain_b.shape_family)
     << '\n';
  os << "domain_b.texture = " << synth::to_string(data.domain_b.texture)
     << '\n';
  os << "domain_b.fg_mean = " << fmt(data.domain_b.intensity.fg_mean) << '\n';
  os << "domain_b.bg_mean = " << fmt(data.domain_b.intensity.bg_mean) << '\n';
  os << "domain_b.noise_sigma = " << fmt(data.domain_b.intensity.noise_sigma)
     << '\n';
  os << "net.latent_dim = " << latent_dim << '\n';
  os << "net.teacher_widths = " << fmt(teacher_widths) << '\n';
  os << "net.student_widths = " << fmt(student_widths) << '\n';
  os << "train.batch_size = " << train.batch_size << '\n';
  os << "train.lr = " << fmt(train.lr) << '\n';
  os << "train.epochs_p1 = " << train.epochs_p1 << '\n';
  os << "train.epochs_p2 = " << train.epochs_p2 << '\n';
  os << "train.epochs_p3 = " << train.epochs_p3 << '\n';
  os << "train.epochs_p4 = " << train.epochs_p4 << '\n';
  os << "train.tactics = " << fmt(train.tactics) << '\n';
  os << "train.seed = " << train.seed << '\n';
  os << "train.warm_start_student = "
     << (train.warm_start_student ? "true" : "false") << '\n';
  os << "graph.node_mode = " << graphs::to_string(node_mode) << '\n';
  os << "loss.lambda = " << fmt(loss.lambda_msan) << '\n';
  os << "loss.alpha = " << fmt(loss.alpha) << '\n';
  os << "loss.beta = " << fmt(loss.beta) << '\n';
  os << "loss.gamma = " << fmt(loss.gamma) << '\n';
  os << "eval.threshold = " << fmt(eval.threshold) << '\n';
  os << "fsd.epsilon = " << fmt(eval.fsd_epsilon) << '\n';
  return os.str();
}

std::string Config::hash() const {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(to_text());
  return os.str();
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (const char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

Config parse_config_text(const std::string& text) {
  Config cfg;
  std::istringstream is(text);
  std::string line;
  std::set<std::string> seen;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": empty key");
    if (!seen.insert(key).second)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": duplicate key '" + key + "'");
    cfg.set(key, value);
  }
  return cfg;
}

Config load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("load_config: cannot read " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_config_text(buf.str());
}

}  // namespace gkd
