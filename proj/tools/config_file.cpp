#include "config_file.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "segcal/error.hpp"

namespace segcal::cli {

using nlohmann::json;

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool bare_key(std::string_view key) {
  if (key.empty()) return false;
  for (char ch : key) {
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '_' && ch != '-') return false;
  }
  return true;
}

class LineParser {
 public:
  LineParser(std::string_view text, std::size_t line) : s_(text), line_(line) {}

  json value() {
    skip_ws();
    if (pos_ >= s_.size()) fail("missing value");
    const char ch = s_[pos_];
    if (ch == '"') return basic_string();
    if (ch == '\'') return literal_string();
    if (ch == '[') return array();
    return scalar();
  }

  void expect_end() {
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] != '#') fail("unexpected trailing text");
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("config line " + std::to_string(line_) + ": " + what);
  }

 private:
  void skip_ws() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }

  json basic_string() {
    std::string out;
    for (++pos_; pos_ < s_.size(); ++pos_) {
      char ch = s_[pos_];
      if (ch == '"') {
        ++pos_;
        return out;
      }
      if (ch == '\\') {
        if (++pos_ >= s_.size()) break;
        switch (s_[pos_]) {
          case 'n': ch = '\n'; break;
          case 't': ch = '\t'; break;
          case '"': ch = '"'; break;
          case '\\': ch = '\\'; break;
          default: fail("unsupported escape in string");
        }
      }
      out += ch;
    }
    fail("unterminated string");
  }

  json literal_string() {
    const std::size_t close = s_.find('\'', pos_ + 1);
    if (close == std::string_view::npos) fail("unterminated string");
    std::string out(s_.substr(pos_ + 1, close - pos_ - 1));
    pos_ = close + 1;
    return out;
  }

  json array() {
    json out = json::array();
    ++pos_;
    for (;;) {
      skip_ws();
      if (pos_ >= s_.size()) fail("unterminated array (arrays must fit on one line)");
      if (s_[pos_] == ']') {
        ++pos_;
        return out;
      }
      json v = value();
      if (v.is_array()) fail("nested arrays are not supported");
      out.push_back(std::move(v));
      skip_ws();
      if (pos_ < s_.size() && s_[pos_] == ',') ++pos_;
      else if (pos_ >= s_.size() || s_[pos_] != ']') fail("expected ',' or ']' in array");
    }
  }

  json scalar() {
    std::size_t end = pos_;
    while (end < s_.size() && s_[end] != ',' && s_[end] != ']' && s_[end] != '#' &&
           s_[end] != ' ' && s_[end] != '\t') {
      ++end;
    }
    std::string tok(s_.substr(pos_, end - pos_));
    pos_ = end;
    if (tok == "true") return true;
    if (tok == "false") return false;
    std::erase(tok, '_');
    if (tok.find_first_of(".eE") == std::string::npos) {
      std::int64_t v = 0;
      const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (ec == std::errc() && ptr == tok.data() + tok.size() && !tok.empty()) return v;
    } else {
      double v = 0.0;
      const char* first = tok.data() + (tok.starts_with('+') ? 1 : 0);
      const auto [ptr, ec] = std::from_chars(first, tok.data() + tok.size(), v);
      if (ec == std::errc() && ptr == tok.data() + tok.size()) return v;
    }
    fail("cannot parse value '" + tok + "'");
  }

  std::string_view s_;
  std::size_t line_;
  std::size_t pos_ = 0;
};

}  // namespace

json parse_toml_subset(std::string_view text) {
  json root = json::object();
  json* table = &root;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    LineParser err(line, line_no);
    if (line.front() == '[') {
      const std::size_t close = line.find(']');
      if (close == std::string_view::npos) err.fail("unterminated table header");
      const std::string_view name = trim(line.substr(1, close - 1));
      if (!bare_key(name)) err.fail("unsupported table name '" + std::string(name) + "'");
      LineParser(line.substr(close + 1), line_no).expect_end();
      if (root.contains(name)) err.fail("duplicate table '" + std::string(name) + "'");
      table = &(root[std::string(name)] = json::object());
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) err.fail("expected key = value");
    const std::string key(trim(line.substr(0, eq)));
    if (!bare_key(key)) err.fail("unsupported key '" + key + "'");
    if (table->contains(key)) err.fail("duplicate key '" + key + "'");
    LineParser p(line.substr(eq + 1), line_no);
    (*table)[key] = p.value();
    p.expect_end();
  }
  return root;
}

json load_config_document(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  if (path.extension() == ".json") {
    try {
      return json::parse(buf.str());
    } catch (const json::parse_error& e) {
      throw ConfigError("config " + path.string() + ": " + e.what());
    }
  }
  return parse_toml_subset(buf.str());
}

namespace {

template <typename T>
T get_as(const json& doc, const std::string& key) {
  try {
    return doc.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

template <typename T>
void read_count(const json& doc, const std::string& key, T& out) {
  if (!doc.contains(key)) return;
  const json& v = doc.at(key);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
    throw ConfigError("config key '" + key + "' must be a non-negative integer");
  }
  out = static_cast<T>(v.get<std::int64_t>());
}

void read_real(const json& doc, const std::string& key, double& out) {
  if (!doc.contains(key)) return;
  if (!doc.at(key).is_number()) throw ConfigError("config key '" + key + "' must be a number");
  out = doc.at(key).get<double>();
}

void reject_unknown(const json& doc, const std::set<std::string>& known, const char* where) {
  for (const auto& [key, value] : doc.items()) {
    if (!known.contains(key)) {
      throw ConfigError(std::string("unknown config key '") + key + "'" + where);
    }
  }
}

}  // namespace

DemoConfig demo_config_from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a table of settings");
  reject_unknown(doc,
                 {"loss", "epochs", "learning_rate", "momentum", "hidden", "image_size",
                  "train_cases", "val_cases", "test_cases", "seeds", "bins",
                  "include_background", "empty_bins", "dice_eps", "temperature_scaling", "data"},
                 "");
  DemoConfig cfg;
  TrainConfig& t = cfg.train;
  if (doc.contains("loss")) t.loss = LossSpec::parse(get_as<std::string>(doc, "loss"));
  read_count(doc, "epochs", t.epochs);
  read_real(doc, "learning_rate", t.learning_rate);
  read_real(doc, "momentum", t.momentum);
  read_count(doc, "hidden", t.hidden);
  read_count(doc, "image_size", t.image_size);
  read_count(doc, "train_cases", t.train_cases);
  read_count(doc, "val_cases", t.val_cases);
  read_count(doc, "test_cases", t.test_cases);
  read_count(doc, "bins", t.bins.num_bins);
  read_real(doc, "dice_eps", t.loss_options.seg.dice_eps);
  if (doc.contains("include_background")) {
    const bool bg = get_as<bool>(doc, "include_background");
    t.loss_options.seg.include_background = bg;
    t.loss_options.calibration.include_background = bg;
  }
  if (doc.contains("empty_bins")) {
    const auto policy = get_as<std::string>(doc, "empty_bins");
    if (policy == "exclude") t.loss_options.calibration.empty_bins = EmptyBinPolicy::kExclude;
    else if (policy == "zero") t.loss_options.calibration.empty_bins = EmptyBinPolicy::kCountAsZero;
    else throw ConfigError("empty_bins must be \"exclude\" or \"zero\", got \"" + policy + "\"");
  }
  if (doc.contains("temperature_scaling")) {
    cfg.temperature_scaling = get_as<bool>(doc, "temperature_scaling");
  }
  if (doc.contains("seeds")) {
    const json& s = doc.at("seeds");
    cfg.seeds.clear();
    const json list = s.is_array() ? s : json::array({s});
    for (const json& v : list) {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
        throw ConfigError("config key 'seeds' must hold non-negative integers");
      }
      cfg.seeds.push_back(v.get<std::uint64_t>());
    }
    if (cfg.seeds.empty()) throw ConfigError("config key 'seeds' is empty");
  }
  if (doc.contains("data")) {
    const json& d = doc.at("data");
    if (!d.is_object()) throw ConfigError("config key 'data' must be a table");
    reject_unknown(d,
                   {"min_blobs", "max_blobs", "min_foreground", "max_foreground",
                    "distance_noise", "intensity_noise", "boundary_noise", "edge_softness",
                    "boundary_width"},
                   " in [data]");
    SyntheticConfig& s = t.data;
    read_count(d, "min_blobs", s.min_blobs);
    read_count(d, "max_blobs", s.max_blobs);
    read_real(d, "min_foreground", s.min_foreground);
    read_real(d, "max_foreground", s.max_foreground);
    read_real(d, "distance_noise", s.distance_noise);
    read_real(d, "intensity_noise", s.intensity_noise);
    read_real(d, "boundary_noise", s.boundary_noise);
    read_real(d, "edge_softness", s.edge_softness);
    read_real(d, "boundary_width", s.boundary_width);
  }
  t.validate();
  return cfg;
}

json demo_config_to_json(const DemoConfig& cfg) {
  const TrainConfig& t = cfg.train;
  const SyntheticConfig& s = t.data;
  return {
      {"loss", t.loss.to_string()},
      {"epochs", t.epochs},
      {"learning_rate", t.learning_rate},
      {"momentum", t.momentum},
      {"hidden", t.hidden},
      {"image_size", t.image_size},
      {"train_cases", t.train_cases},
      {"val_cases", t.val_cases},
      {"test_cases", t.test_cases},
      {"seeds", cfg.seeds},
      {"bins", t.bins.num_bins},
      {"include_background", t.loss_options.seg.include_background},
      {"empty_bins", t.loss_options.calibration.empty_bins == EmptyBinPolicy::kExclude
                         ? "exclude"
                         : "zero"},
      {"dice_eps", t.loss_options.seg.dice_eps},
      {"temperature_scaling", cfg.temperature_scaling},
      {"data",
       {{"min_blobs", s.min_blobs},
        {"max_blobs", s.max_blobs},
        {"min_foreground", s.min_foreground},
        {"max_foreground", s.max_foreground},
        {"distance_noise", s.distance_noise},
        {"intensity_noise", s.intensity_noise},
        {"boundary_noise", s.boundary_noise},
        {"edge_softness", s.edge_softness},
        {"boundary_width", s.boundary_width}}},
  };
}

}  // namespace segcal::cli
