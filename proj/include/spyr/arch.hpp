#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "spyr/error.hpp"
#include "spyr/rf.hpp"

namespace spyr {

/// Declarative generator layout: pre-encoder, stroke pyramid, stroke decoder.
/// Branch k is applied to branch k-1's output (branch 0 to the encoder's).
struct ArchSpec {
  std::vector<LayerSpec> encoder;
  std::vector<std::vector<LayerSpec>> branches;
  std::vector<LayerSpec> decoder;
  std::vector<double> branch_scales;
  int in_channels = 3;

  std::size_t num_branches() const { return branches.size(); }

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

/// Desk-scale default: 3 branches, encoder stride 4, branch scales 48/96/144.
/// Branch-output receptive fields are 53, 69 and 85 input pixels.
inline ArchSpec default_arch() {
  ArchSpec a;
  a.encoder = {LayerSpec::conv(9, 1, 16), LayerSpec::conv(5, 2, 32), LayerSpec::conv(5, 2, 48)};
  const LayerSpec c3 = LayerSpec::conv(3, 1, 48);
  a.branches = {{c3, c3, c3, c3}, {c3, c3}, {c3, c3}};
  a.decoder = {LayerSpec::up2(), LayerSpec::conv(3, 1, 32), LayerSpec::up2(), LayerSpec::conv(3, 1, 32),
               LayerSpec::conv(9, 1, 3, PostOp::sigmoid)};
  a.branch_scales = {48, 96, 144};
  return a;
}

// ---------------------------------------------------------------- text form
//
// Layers are written as comma-separated tokens:
//   conv<k>x<k>/s<stride>/c<channels>[/p<pad>][+in_relu|+sigmoid|+none]
//   up2
//   tap

inline std::string format_layer(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::resize_up:
      return "up2";
    case LayerKind::identity_tap:
      return "tap";
    case LayerKind::conv:
      break;
  }
  std::ostringstream os;
  os << "conv" << l.kernel << 'x' << l.kernel << "/s" << l.stride << "/c" << l.out_channels;
  if (l.padding != l.kernel / 2) os << "/p" << l.padding;
  if (l.post == PostOp::sigmoid) os << "+sigmoid";
  if (l.post == PostOp::none) os << "+none";
  return os.str();
}

inline std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(trim(item));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline int parse_int(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  fail("config", "invalid integer for " + what + ": '" + s + "'");
}

inline double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  fail("config", "invalid number for " + what + ": '" + s + "'");
}

inline LayerSpec parse_layer(const std::string& token) {
  const std::string t = trim(token);
  if (t == "up2") return LayerSpec::up2();
  if (t == "tap") return LayerSpec::tap();
  require(t.rfind("conv", 0) == 0, "config", "unknown layer token '" + t + "'");
  std::string body = t.substr(4);
  PostOp post = PostOp::in_relu;
  if (const auto plus = body.find('+'); plus != std::string::npos) {
    const std::string p = body.substr(plus + 1);
    if (p == "in_relu")
      post = PostOp::in_relu;
    else if (p == "sigmoid")
      post = PostOp::sigmoid;
    else if (p == "none")
      post = PostOp::none;
    else
      fail("config", "unknown post-op '" + p + "' in '" + t + "'");
    body = body.substr(0, plus);
  }
  const auto parts = split(body, '/');
  require(parts.size() >= 3, "config", "conv token needs kernel, stride and channels: '" + t + "'");
  const auto x = parts[0].find('x');
  require(x != std::string::npos, "config", "conv kernel must be written <k>x<k>: '" + t + "'");
  const int k = parse_int(parts[0].substr(0, x), "kernel");
  require(parse_int(parts[0].substr(x + 1), "kernel") == k, "config", "only square kernels are supported");
  LayerSpec l = LayerSpec::conv(k, 1, 1, post);
  for (std::size_t i = 1; i < parts.size(); ++i) {
    require(parts[i].size() >= 2, "config", "bad conv field in '" + t + "'");
    const int v = parse_int(parts[i].substr(1), "conv field");
    switch (parts[i][0]) {
      case 's': l.stride = v; break;
      case 'c': l.out_channels = v; break;
      case 'p': l.padding = v; break;
      default: fail("config", "bad conv field '" + parts[i] + "' in '" + t + "'");
    }
  }
  validate_layer(l);
  return l;
}

inline std::string format_chain(const std::vector<LayerSpec>& chain) {
  std::string s;
  for (std::size_t i = 0; i < chain.size(); ++i) s += (i ? ", " : "") + format_layer(chain[i]);
  return s;
}

inline std::vector<LayerSpec> parse_chain(const std::string& s) {
  std::vector<LayerSpec> out;
  if (trim(s).empty()) return out;
  for (const auto& tok : split(s, ',')) out.push_back(parse_layer(tok));
  return out;
}

inline std::string format_doubles(const std::vector<double>& v) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

inline std::vector<double> parse_doubles(const std::string& s, const std::string& what) {
  std::vector<double> out;
  if (trim(s).empty()) return out;
  for (const auto& tok : split(s, ',')) out.push_back(parse_double(tok, what));
  return out;
}

/// `arch.*` key=value lines.
inline std::map<std::string, std::string> arch_to_kv(const ArchSpec& a) {
  std::map<std::string, std::string> kv;
  kv["arch.in_channels"] = std::to_string(a.in_channels);
  kv["arch.encoder"] = format_chain(a.encoder);
  kv["arch.branches"] = std::to_string(a.branches.size());
  for (std::size_t b = 0; b < a.branches.size(); ++b) kv["arch.branch." + std::to_string(b)] = format_chain(a.branches[b]);
  kv["arch.decoder"] = format_chain(a.decoder);
  kv["arch.branch_scales"] = format_doubles(a.branch_scales);
  return kv;
}

/// Reads `arch.*` keys; anything absent falls back to the default arch.
inline ArchSpec arch_from_kv(const std::map<std::string, std::string>& kv) {
  ArchSpec a = default_arch();
  auto get = [&](const std::string& k) -> const std::string* {
    auto it = kv.find(k);
    return it == kv.end() ? nullptr : &it->second;
  };
  if (auto v = get("arch.in_channels")) a.in_channels = parse_int(*v, "arch.in_channels");
  if (auto v = get("arch.encoder")) a.encoder = parse_chain(*v);
  if (auto v = get("arch.decoder")) a.decoder = parse_chain(*v);
  if (auto v = get("arch.branches")) {
    const int k = parse_int(*v, "arch.branches");
    require(k >= 1, "config", "arch.branches must be >= 1");
    a.branches.assign(static_cast<std::size_t>(k), {});
    for (int b = 0; b < k; ++b) {
      auto c = get("arch.branch." + std::to_string(b));
      require(c != nullptr, "config", "missing arch.branch." + std::to_string(b));
      a.branches[static_cast<std::size_t>(b)] = parse_chain(*c);
    }
  }
  if (auto v = get("arch.branch_scales")) a.branch_scales = parse_doubles(*v, "arch.branch_scales");
  return a;
}

// ---------------------------------------------------------------- pyramid analysis

/// Encoder plus branches 0..k: the path that produces branch k's features.
inline std::vector<LayerSpec> branch_chain(const ArchSpec& a, std::size_t k) {
  std::vector<LayerSpec> chain = a.encoder;
  for (std::size_t b = 0; b <= k && b < a.branches.size(); ++b)
    chain.insert(chain.end(), a.branches[b].begin(), a.branches[b].end());
  return chain;
}

inline int encoder_stride(const ArchSpec& a) {
  int s = 1;
  for (const auto& l : a.encoder) {
    require(l.kind != LayerKind::resize_up, "arch", "the encoder may not upsample");
    if (l.kind == LayerKind::conv) s *= l.stride;
  }
  return s;
}

struct PyramidReport {
  bool ok = true;
  std::vector<Fraction> branch_rf;
  std::vector<std::string> violations;
};

/// Branch-output receptive fields must grow strictly from branch to branch.
inline PyramidReport validate_pyramid(const ArchSpec& a) {
  PyramidReport rep;
  for (std::size_t k = 0; k < a.num_branches(); ++k) {
    const auto chain = branch_chain(a, k);
    rep.branch_rf.push_back(chain.empty() ? Fraction{1, 1} : compute_rf(chain).final_rf());
    if (k > 0 && rep.branch_rf[k] <= rep.branch_rf[k - 1]) {
      rep.ok = false;
      rep.violations.push_back("branch " + std::to_string(k) + " RF " + rep.branch_rf[k].str() +
                               " does not exceed branch " + std::to_string(k - 1) + " RF " +
                               rep.branch_rf[k - 1].str());
    }
  }
  return rep;
}

/// Structural checks the generator relies on; throws on the first failure.
inline void check_arch(const ArchSpec& a) {
  require(!a.branches.empty(), "arch", "at least one branch is required");
  require(a.branch_scales.size() == a.branches.size(), "arch",
          "branch_scales has " + std::to_string(a.branch_scales.size()) + " entries for " +
              std::to_string(a.branches.size()) + " branches");
  for (std::size_t k = 1; k < a.branch_scales.size(); ++k)
    require(a.branch_scales[k] > a.branch_scales[k - 1], "arch", "branch_scales must be strictly increasing");
  for (const auto& l : a.encoder) validate_layer(l);
  for (const auto& l : a.decoder) validate_layer(l);
  require(!a.encoder.empty() && a.encoder.back().kind == LayerKind::conv, "arch", "encoder must end in a conv");
  const int width = a.encoder.back().out_channels;
  for (std::size_t b = 0; b < a.branches.size(); ++b) {
    int c = width;
    for (const auto& l : a.branches[b]) {
      require(l.kind != LayerKind::resize_up, "arch", "branches may not resample");
      if (l.kind != LayerKind::conv) continue;
      validate_layer(l);
      require(l.stride == 1 && l.padding == l.kernel / 2, "arch", "pyramid convs must be stride-1 and same-padded");
      c = l.out_channels;
    }
    require(c == width, "arch", "every branch must output " + std::to_string(width) + " channels");
  }
  const auto rep = validate_pyramid(a);
  require(rep.ok, "arch", rep.violations.empty() ? "pyramid invalid" : rep.violations.front());
}

struct BranchPlan {
  std::vector<LayerSpec> layers;
  std::size_t attach_after = 0;  // index of the branch the new one extends
  Fraction new_rf;
};

/// One 3x3 conv appended after the last branch. New scales must exceed every
/// existing scale; intermediate sizes are reachable by interpolation instead.
inline BranchPlan plan_incremental_branch(const ArchSpec& a, double new_scale) {
  require(!a.branches.empty() && !a.branch_scales.empty(), "rejected_scale",
          "cannot augment an empty pyramid: there is no branch to attach to");
  const double top = a.branch_scales.back();
  require(new_scale > top, "rejected_scale",
          "new scale " + std::to_string(new_scale) + " does not exceed the largest trained scale " +
              std::to_string(top) + "; serve intermediate sizes through interpolation instead");
  BranchPlan plan;
  plan.attach_after = a.branches.size() - 1;
  plan.layers = {LayerSpec::conv(3, 1, a.encoder.back().out_channels)};
  auto chain = branch_chain(a, a.branches.size() - 1);
  chain.insert(chain.end(), plan.layers.begin(), plan.layers.end());
  plan.new_rf = compute_rf(chain).final_rf();
  return plan;
}

inline ArchSpec apply_plan(ArchSpec a, const BranchPlan& plan, double new_scale) {
  a.branches.push_back(plan.layers);
  a.branch_scales.push_back(new_scale);
  return a;
}

}  // namespace spyr
