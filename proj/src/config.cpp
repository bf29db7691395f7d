#include "fpnet/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace fpnet {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_size(std::string_view key, std::string_view v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw UsageError("config key '" + std::string(key) + "' expects a non-negative integer, got '" + std::string(v) + "'");
  }
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  const std::string s(v);
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) {
    throw UsageError("config key '" + std::string(key) + "' expects a number, got '" + s + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw UsageError("config key '" + std::string(key) + "' expects on/off, got '" + std::string(v) + "'");
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string to_string(nn::FreqBranches mode) {
  switch (mode) {
    case nn::FreqBranches::high: return "high";
    case nn::FreqBranches::low: return "low";
    default: return "both";
  }
}

nn::FreqBranches parse_freq_mode(std::string_view text) {
  if (text == "both") return nn::FreqBranches::both;
  if (text == "high") return nn::FreqBranches::high;
  if (text == "low") return nn::FreqBranches::low;
  throw UsageError("frequency mode must be high, low or both, got '" + std::string(text) + "'");
}

void FPNetConfig::set(std::string_view key, std::string_view value) {
  value = trim(value);
  if (key == "input_size") input_size = parse_size(key, value);
  else if (key == "channels") {
    channels.clear();
    std::string_view rest = value;
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      channels.push_back(parse_size(key, trim(rest.substr(0, comma))));
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
  } else if (key == "ncd_width") ncd_width = parse_size(key, value);
  else if (key == "cfm_width") cfm_width = parse_size(key, value);
  else if (key == "bottleneck_width") bottleneck_width = parse_size(key, value);
  else if (key == "alpha_oct") alpha_oct = parse_double(key, value);
  else if (key == "lr") lr = parse_double(key, value);
  else if (key == "weight_decay") weight_decay = parse_double(key, value);
  else if (key == "batch") batch = parse_size(key, value);
  else if (key == "epochs") epochs = parse_size(key, value);
  else if (key == "steps") steps = parse_size(key, value);
  else if (key == "seed") seed = parse_size(key, value);
  else if (key == "augment") augment = parse_bool(key, value);
  else if (key == "use_fpm") use_fpm = parse_bool(key, value);
  else if (key == "use_hrp") use_hrp = parse_bool(key, value);
  else if (key == "use_cfm") use_cfm = parse_bool(key, value);
  else if (key == "freq_mode") freq_mode = parse_freq_mode(value);
  else throw UsageError("unknown config key '" + std::string(key) + "'");
}

void FPNetConfig::validate() const {
  if (input_size == 0 || input_size % 32 != 0) {
    throw UsageError("input_size must be a positive multiple of 32, got " + std::to_string(input_size));
  }
  if (channels.size() != 4) throw UsageError("channels must list four encoder widths");
  for (std::size_t c : channels) {
    if (c < 2) throw UsageError("encoder widths must be at least 2");
  }
  if (ncd_width == 0 || cfm_width == 0 || bottleneck_width == 0) throw UsageError("widths must be positive");
  if (!(alpha_oct > 0.0 && alpha_oct < 1.0)) throw UsageError("alpha_oct must lie in (0,1)");
  for (std::size_t c : {channels[1], channels[2], channels[3]}) nn::split_channels(c, alpha_oct);
  if (!(lr > 0.0)) throw UsageError("lr must be positive");
  if (weight_decay < 0.0) throw UsageError("weight_decay must be non-negative");
  if (batch == 0) throw UsageError("batch must be positive");
  if (epochs == 0 && steps == 0) throw UsageError("either epochs or steps must be positive");
}

std::string FPNetConfig::canonical() const {
  std::ostringstream o;
  o << "input_size=" << input_size << "\nchannels=";
  for (std::size_t i = 0; i < channels.size(); ++i) o << (i ? "," : "") << channels[i];
  o << "\nncd_width=" << ncd_width << "\ncfm_width=" << cfm_width << "\nbottleneck_width=" << bottleneck_width
    << "\nalpha_oct=" << format_double(alpha_oct) << "\nlr=" << format_double(lr)
    << "\nweight_decay=" << format_double(weight_decay) << "\nbatch=" << batch << "\nepochs=" << epochs
    << "\nsteps=" << steps << "\nseed=" << seed << "\naugment=" << (augment ? "on" : "off")
    << "\nuse_fpm=" << (use_fpm ? "on" : "off") << "\nuse_hrp=" << (use_hrp ? "on" : "off")
    << "\nuse_cfm=" << (use_cfm ? "on" : "off") << "\nfreq_mode=" << to_string(freq_mode) << "\n";
  return o.str();
}

std::uint64_t FPNetConfig::hash() const { return fnv1a(canonical()); }

std::string FPNetConfig::hash_hex() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
  return buf;
}

FPNetConfig FPNetConfig::parse(std::string_view text) {
  FPNetConfig cfg;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw UsageError("config line " + std::to_string(line_no) + " is not key=value: '" + std::string(line) + "'");
    }
    cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

FPNetConfig FPNetConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

}  // namespace fpnet
