#include "config.hpp"

#include <fstream>
#include <sstream>

namespace ivafuse {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    fail(Err::Usage, key + ": '" + v + "' is not an integer");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    fail(Err::Usage, key + ": '" + v + "' is not a number");
  }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    std::uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    fail(Err::Usage, key + ": '" + v + "' is not an unsigned integer");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(Err::Usage, key + ": '" + v + "' is not a boolean (true/false/1/0)");
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "frame_len") frame_len = to_int(key, value);
  else if (key == "frame_shift") frame_shift = to_int(key, value);
  else if (key == "target_frames") target_frames = to_int(key, value);
  else if (key == "preemphasis") preemphasis = to_double(key, value);
  else if (key == "vad_energy_ratio") vad_energy_ratio = to_double(key, value);
  else if (key == "sample_rate") sample_rate = to_int(key, value);
  else if (key == "lpc_order") lpc_order = to_int(key, value);
  else if (key == "n_mels") n_mels = to_int(key, value);
  else if (key == "n_ceps") n_ceps = to_int(key, value);
  else if (key == "iva_eta0") iva_eta0 = to_double(key, value);
  else if (key == "iva_eta_decay") iva_eta_decay = to_double(key, value);
  else if (key == "iva_eta_min") iva_eta_min = to_double(key, value);
  else if (key == "iva_cost_tol") iva_cost_tol = to_double(key, value);
  else if (key == "iva_max_iters") iva_max_iters = to_int(key, value);
  else if (key == "shared_demixing") shared_demixing = to_bool(key, value);
  else if (key == "variant") variant = value;
  else if (key == "n1") n1 = to_int(key, value);
  else if (key == "n2") n2 = to_int(key, value);
  else if (key == "n3") n3 = to_int(key, value);
  else if (key == "C1") C1 = to_int(key, value);
  else if (key == "C2") C2 = to_int(key, value);
  else if (key == "C3") C3 = to_int(key, value);
  else if (key == "D") D = to_int(key, value);
  else if (key == "F1") F1 = to_int(key, value);
  else if (key == "F2") F2 = to_int(key, value);
  else if (key == "feature_mode") feature_mode = value;
  else if (key == "batch_size") batch_size = to_int(key, value);
  else if (key == "epochs") epochs = to_int(key, value);
  else if (key == "lr") lr = to_double(key, value);
  else if (key == "seed") seed = to_u64(key, value);
  else if (key == "threads") threads = to_int(key, value);
  else fail(Err::Usage, "unknown config key '" + key + "'");
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(Err::Io, "cannot open config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    std::size_t eq = s.find('=');
    if (eq == std::string::npos)
      fail(Err::Usage, path + ":" + std::to_string(lineno) + ": expected key=value");
    set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
}

std::string RunConfig::dump() const {
  std::ostringstream o;
  o << "frame_len=" << frame_len << "\nframe_shift=" << frame_shift
    << "\ntarget_frames=" << target_frames << "\npreemphasis=" << format_double(preemphasis)
    << "\nvad_energy_ratio=" << format_double(vad_energy_ratio)
    << "\nsample_rate=" << sample_rate << "\nlpc_order=" << lpc_order
    << "\nn_mels=" << n_mels << "\nn_ceps=" << n_ceps
    << "\niva_eta0=" << format_double(iva_eta0)
    << "\niva_eta_decay=" << format_double(iva_eta_decay)
    << "\niva_eta_min=" << format_double(iva_eta_min)
    << "\niva_cost_tol=" << format_double(iva_cost_tol)
    << "\niva_max_iters=" << iva_max_iters
    << "\nshared_demixing=" << (shared_demixing ? "true" : "false")
    << "\nvariant=" << variant << "\nn1=" << n1 << "\nn2=" << n2 << "\nn3=" << n3
    << "\nC1=" << C1 << "\nC2=" << C2 << "\nC3=" << C3 << "\nD=" << D << "\nF1=" << F1
    << "\nF2=" << F2 << "\nfeature_mode=" << feature_mode
    << "\nbatch_size=" << batch_size << "\nepochs=" << epochs
    << "\nlr=" << format_double(lr) << "\nseed=" << seed << "\nthreads=" << threads
    << "\n";
  return o.str();
}

FrameConfig RunConfig::frame() const {
  FrameConfig f;
  f.frame_len = frame_len;
  f.frame_shift = frame_shift;
  f.target_frames = target_frames;
  f.preemphasis = preemphasis;
  f.vad_energy_ratio = vad_energy_ratio;
  f.validate();
  return f;
}

IvaConfig RunConfig::iva() const {
  IvaConfig c;
  c.eta0 = iva_eta0;
  c.eta_decay = iva_eta_decay;
  c.eta_min = iva_eta_min;
  c.cost_tol = iva_cost_tol;
  c.max_iters = iva_max_iters;
  c.seed = seed;
  c.validate();
  return c;
}

NetworkSpec RunConfig::network(int n_classes) const {
  Variant v = variant_from_name(variant);
  bool pair_mode = feature_mode == "y_pair";
  bool tensor_mode = feature_mode == "y_tensor" || feature_mode == "x_tensor";
  bool single_mode = feature_mode == "x1" || feature_mode == "x2";
  if (!pair_mode && !tensor_mode && !single_mode)
    fail(Err::Usage, "unknown feature_mode '" + feature_mode + "'");
  if (pair_mode && v == Variant::NCNN)
    fail(Err::Usage, "feature_mode y_pair needs a parallel variant (pcnn-i or pcnn-c)");
  if ((tensor_mode || single_mode) && v != Variant::NCNN)
    fail(Err::Usage, "feature_mode " + feature_mode + " needs variant ncnn");

  int n_lpc = 3 * lpc_order, n_mfcc = 3 * n_ceps;
  int N;
  if (feature_mode == "x1") N = n_lpc;
  else if (feature_mode == "x2") N = n_mfcc;
  else {
    if (n_lpc != n_mfcc)
      fail(Err::Usage, "fused modes need 3*lpc_order == 3*n_ceps (slabs must share N)");
    N = n_lpc;
  }

  NetworkSpec s = default_spec(v, N, target_frames, single_mode ? 1 : 2, n_classes, n1);
  s.n2 = n2;
  s.n3 = n3;
  s.C1 = C1;
  s.C2 = C2;
  s.C3 = C3;
  s.D = D;
  if (F1 > 0) s.F1 = F1;
  if (F2 > 0) s.F2 = F2;
  s.validate();
  return s;
}

void RunConfig::validate() const {
  frame();
  iva();
  if (lpc_order < 1 || lpc_order >= frame_len) fail(Err::Usage, "need 1 <= lpc_order < frame_len");
  if (n_ceps < 1 || n_ceps > n_mels) fail(Err::Usage, "need 1 <= n_ceps <= n_mels");
  if (sample_rate < 1) fail(Err::Usage, "sample_rate must be positive");
  if (batch_size < 2) fail(Err::Usage, "batch_size must be >= 2");
  if (epochs < 1) fail(Err::Usage, "epochs must be >= 1");
  if (!(lr > 0.0)) fail(Err::Usage, "lr must be > 0");
}

}  // namespace ivafuse
