#include "ivafuse.h"

#include "config.hpp"
#include "synth.hpp"
#include "tensor_io.hpp"
#include "trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

using namespace ivafuse;

namespace {

thread_local std::string g_last_error;

template <typename F>
ivafuse_status guard(F&& fn) {
  try {
    fn();
    g_last_error.clear();
    return IVAFUSE_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return e.code() == Err::Usage ? IVAFUSE_USAGE : IVAFUSE_RUNTIME;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return IVAFUSE_RUNTIME;
  }
}

const RunConfig& as_config(const ivafuse_config* cfg) {
  if (!cfg) fail(Err::Usage, "config handle is null");
  return *reinterpret_cast<const RunConfig*>(cfg);
}

void require(bool ok, const std::string& what) {
  if (!ok) fail(Err::Usage, what);
}

char* copy_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(Err::Io, "cannot open " + path + " for write");
  f << text;
  if (!f) fail(Err::Io, "write failed: " + path);
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(a) + std::abs(b), 1e-6); }

}  // namespace

extern "C" {

const char* ivafuse_version(void) { return "0.1.0"; }

const char* ivafuse_last_error(void) { return g_last_error.c_str(); }

void ivafuse_string_free(char* s) { std::free(s); }

ivafuse_config* ivafuse_config_new(void) {
  return reinterpret_cast<ivafuse_config*>(new (std::nothrow) RunConfig());
}

void ivafuse_config_free(ivafuse_config* cfg) { delete reinterpret_cast<RunConfig*>(cfg); }

ivafuse_status ivafuse_config_set(ivafuse_config* cfg, const char* key, const char* value) {
  return guard([&] {
    require(cfg && key && value, "config_set: null argument");
    reinterpret_cast<RunConfig*>(cfg)->set(key, value);
  });
}

ivafuse_status ivafuse_config_load_file(ivafuse_config* cfg, const char* path) {
  return guard([&] {
    require(cfg && path, "config_load_file: null argument");
    reinterpret_cast<RunConfig*>(cfg)->load_file(path);
  });
}

ivafuse_status ivafuse_config_dump(const ivafuse_config* cfg, char** text) {
  return guard([&] {
    require(text, "config_dump: null output");
    *text = copy_string(as_config(cfg).dump());
    if (!*text) fail(Err::Io, "out of memory");
  });
}

ivafuse_status ivafuse_config_validate(const ivafuse_config* cfg) {
  return guard([&] { as_config(cfg).validate(); });
}

ivafuse_status ivafuse_extract(const ivafuse_config* cfg, const char* manifest_path,
                               const char* cache_dir, size_t* n_ok, size_t* n_failed) {
  return guard([&] {
    require(manifest_path && cache_dir, "extract: null path");
    PrepareResult r = prepare_dataset(manifest_path, cache_dir, as_config(cfg));
    if (n_ok) *n_ok = static_cast<size_t>(r.n_ok);
    if (n_failed) *n_failed = static_cast<size_t>(r.n_failed);
  });
}

ivafuse_status ivafuse_run_iva_file(const ivafuse_config* cfg, const char* x_path,
                                    const char* y_path, const char* w_path,
                                    const char* trace_csv, double* final_cost, int* iters) {
  return guard([&] {
    require(x_path, "run_iva_file: null input path");
    FeatureTensor x = read_tensor(x_path);
    IvaResult res = run_iva(x, as_config(cfg).iva());
    if (y_path) write_tensor(y_path, res.Y);
    if (w_path) write_demixing(w_path, res.W);
    if (trace_csv) {
      std::string text = "iter,eta,cost\n";
      for (const TraceRow& row : res.trace)
        text += std::to_string(row.iter) + "," + format_double(row.eta) + "," +
                format_double(row.cost) + "\n";
      write_text(trace_csv, text);
    }
    if (final_cost) *final_cost = res.final_cost;
    if (iters) *iters = res.iters;
  });
}

ivafuse_status ivafuse_train(const ivafuse_config* cfg, const char* cache_dir,
                             const char* metrics_path, const char* checkpoint_path,
                             double* best_eval_acc, double* final_train_acc,
                             double* final_loss) {
  return guard([&] {
    require(cache_dir, "train: null cache dir");
    const RunConfig& rc = as_config(cfg);
    rc.validate();
    FeatureStore store = FeatureStore::load(cache_dir);
    TrainOptions opts;
    if (metrics_path) opts.metrics_path = metrics_path;
    if (checkpoint_path) opts.checkpoint_path = checkpoint_path;
    TrainResult r = train_network(store, rc, opts);
    if (best_eval_acc) *best_eval_acc = r.best_eval_acc;
    if (final_train_acc) *final_train_acc = r.final_train_acc;
    if (final_loss) *final_loss = r.final_loss;
  });
}

ivafuse_status ivafuse_eval(const ivafuse_config* cfg, const char* cache_dir,
                            const char* checkpoint_path, double* test_acc) {
  return guard([&] {
    require(cache_dir && checkpoint_path, "eval: null path");
    const RunConfig& rc = as_config(cfg);
    FeatureStore store = FeatureStore::load(cache_dir);
    Network net = Network::load(checkpoint_path);
    double acc = evaluate_acc(net, store, rc.feature_mode, Split::Test, rc.batch_size);
    if (test_acc) *test_acc = acc;
  });
}

ivafuse_status ivafuse_synth_speakers(const char* out_dir, int n_speakers, int n_train,
                                      int n_test, uint64_t seed, char** manifest_path) {
  return guard([&] {
    require(out_dir, "synth_speakers: null output dir");
    std::string path = gen_synth_speakers(out_dir, n_speakers, n_train, n_test, seed);
    if (manifest_path) {
      *manifest_path = copy_string(path);
      if (!*manifest_path) fail(Err::Io, "out of memory");
    }
  });
}

ivafuse_status ivafuse_synth_mixture(int n, int k, int t, uint64_t seed,
                                     const char* out_dir) {
  return guard([&] {
    require(out_dir, "synth_mixture: null output dir");
    SynthMixture mix = gen_scv_mixture(n, k, t, seed);
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) fail(Err::Io, std::string("cannot create ") + out_dir);
    std::string base = std::string(out_dir) + "/mixture";
    write_tensor(base + ".s.bin", mix.S);
    write_demixing(base + ".a.bin", mix.A);
    write_tensor(base + ".x.bin", mix.X);
  });
}

ivafuse_status ivafuse_gradcheck_iva(int instances, uint64_t seed, double* max_grad_rel,
                                     double* max_hess_rel) {
  return guard([&] {
    require(instances >= 1 && instances <= 1000, "gradcheck_iva: instances must be in 1..1000");
    const double eps = 1e-6;
    double worst_g = 0.0, worst_h = 0.0;
    for (int i = 0; i < instances; ++i) {
      int N = 2 + i % 4;
      int K = 2 + i % 2;
      int T = std::max(10 * N * K, 160);
      SynthMixture mix = gen_scv_mixture(N, K, T, child_seed(seed, 100 + i));
      auto [X, wt] = whiten(mix.X);
      DemixingTensor W = init_demixing(N, K, child_seed(seed, 200 + i));
      IfcTensor Y = demix(W, X);
      ScvStats stats = scv_covariances(Y, &X);

      for (int n = 0; n < N; ++n) {
        Vec g = gradient_wn(n, W, X, Y, stats);
        Mat H = hessian_blocks(n, W, stats);
        for (int k = 0; k < K; ++k) {
          for (int j = 0; j < N; ++j) {
            // cost derivative: statistics follow the perturbation
            DemixingTensor Wp = W;
            Wp[k](n, j) += eps;
            double cp = cost_iva(Wp, scv_covariances(demix(Wp, X)));
            Wp[k](n, j) -= 2 * eps;
            double cm = cost_iva(Wp, scv_covariances(demix(Wp, X)));
            double fd = (cp - cm) / (2 * eps);
            worst_g = std::max(worst_g, rel_err(fd, g(k * N + j)));

            // gradient derivative: statistics frozen at the base point
            Wp[k](n, j) += 2 * eps;
            Vec gp = gradient_wn(n, Wp, X, demix(Wp, X), stats);
            Wp[k](n, j) -= 2 * eps;
            Vec gm = gradient_wn(n, Wp, X, demix(Wp, X), stats);
            Vec hfd = (gp - gm) / (2 * eps);
            for (int r = 0; r < K * N; ++r)
              worst_h = std::max(worst_h, rel_err(hfd(r), H(r, k * N + j)));
          }
        }
      }
    }
    if (max_grad_rel) *max_grad_rel = worst_g;
    if (max_hess_rel) *max_hess_rel = worst_h;
  });
}

ivafuse_status ivafuse_gradcheck_nn(const ivafuse_config* cfg, int n, int t, int k,
                                    int n_classes, uint64_t seed, double* max_rel) {
  return guard([&] {
    const RunConfig& rc = as_config(cfg);
    NetworkSpec spec =
        default_spec(variant_from_name(rc.variant), n, t, k, n_classes, rc.n1);
    spec.n2 = rc.n2;
    spec.n3 = rc.n3;
    spec.C1 = rc.C1;
    spec.C2 = rc.C2;
    spec.C3 = rc.C3;
    spec.D = rc.D;
    if (rc.F1 > 0) spec.F1 = rc.F1;
    if (rc.F2 > 0) spec.F2 = rc.F2;
    spec.validate();
    double worst = nn_gradcheck(spec, seed);
    if (max_rel) *max_rel = worst;
  });
}

ivafuse_status ivafuse_isi_bench(const ivafuse_config* cfg, const int* dims, size_t n_dims,
                                 int k, int t, int trials, uint64_t seed,
                                 const char* csv_path, double threshold,
                                 double* median_isi, int* n_below) {
  return guard([&] {
    require(trials >= 1, "isi_bench: trials must be >= 1");
    std::vector<int> dim_list;
    if (dims && n_dims > 0) dim_list.assign(dims, dims + n_dims);
    else dim_list = {3, 4, 5};
    const RunConfig& rc = as_config(cfg);
    std::vector<IsiTrialRow> rows =
        isi_bench(dim_list, k, t, trials, seed, rc.iva(), rc.threads);
    if (csv_path) write_text(csv_path, isi_rows_csv(rows));
    std::vector<double> isis;
    int below = 0;
    for (const IsiTrialRow& r : rows) {
      isis.push_back(r.joint_isi);
      if (r.joint_isi < threshold) ++below;
    }
    if (median_isi) *median_isi = median_of(isis);
    if (n_below) *n_below = below;
  });
}

}  // extern "C"
