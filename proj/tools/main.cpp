#include "ivafuse.h"

#include "CLI11.hpp"

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

namespace {

struct ConfigHandle {
  ivafuse_config* h = ivafuse_config_new();
  ~ConfigHandle() { ivafuse_config_free(h); }
};

struct CommonOpts {
  std::string config_file;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOpts& c) {
  cmd->add_option("--config", c.config_file, "key=value config file");
  cmd->add_option("--set", c.sets, "override one config key as key=value (repeatable)");
}

int fail_status(ivafuse_status st) {
  std::fprintf(stderr, "error: %s\n", ivafuse_last_error());
  return static_cast<int>(st);
}

#define CHECK(call)                                    \
  do {                                                 \
    ivafuse_status st_ = (call);                       \
    if (st_ != IVAFUSE_OK) return fail_status(st_);    \
  } while (0)

int apply_common(ivafuse_config* cfg, const CommonOpts& c) {
  if (!c.config_file.empty()) CHECK(ivafuse_config_load_file(cfg, c.config_file.c_str()));
  for (const std::string& kv : c.sets) {
    std::size_t eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) {
      std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
      return 1;
    }
    CHECK(ivafuse_config_set(cfg, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()));
  }
  return 0;
}

// Reproducibility: every subcommand logs the full resolved config up front.
int print_config(const ivafuse_config* cfg) {
  char* text = nullptr;
  CHECK(ivafuse_config_dump(cfg, &text));
  std::fprintf(stderr, "# resolved config\n%s# end config\n", text);
  ivafuse_string_free(text);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ivafuse: LPC/MFCC feature fusion via independent vector analysis, "
               "with parallel-CNN speaker classifiers"};
  app.require_subcommand(1);

  // extract
  auto* cmd_extract = app.add_subcommand(
      "extract", "Build the feature/IVA cache for every sentence in a manifest");
  std::string manifest, cache_dir;
  CommonOpts extract_common;
  cmd_extract->add_option("--manifest", manifest, "CSV: path,speaker_id[,split]")->required();
  cmd_extract->add_option("--out", cache_dir, "cache directory")->required();
  add_common(cmd_extract, extract_common);

  // iva
  auto* cmd_iva = app.add_subcommand("iva", "Separate one whitened tensor file");
  std::string iva_in, iva_y, iva_w, iva_trace;
  CommonOpts iva_common;
  cmd_iva->add_option("--in", iva_in, "input tensor (IVFT)")->required();
  cmd_iva->add_option("--out-y", iva_y, "separated tensor output (IVFT)");
  cmd_iva->add_option("--out-w", iva_w, "demixing tensor output (IVFW)");
  cmd_iva->add_option("--trace", iva_trace, "iteration trace CSV (iter,eta,cost)");
  add_common(cmd_iva, iva_common);

  // train
  auto* cmd_train = app.add_subcommand("train", "Train a classifier on a prepared cache");
  std::string train_cache, train_metrics, train_ckpt, train_variant, train_mode;
  int train_n1 = -1;
  CommonOpts train_common;
  cmd_train->add_option("--cache", train_cache, "cache directory from extract")->required();
  cmd_train->add_option("--metrics", train_metrics, "per-epoch metrics CSV output");
  cmd_train->add_option("--checkpoint", train_ckpt, "best-model checkpoint output");
  cmd_train->add_option("--variant", train_variant, "pcnn-i|pcnn-c|ncnn");
  cmd_train->add_option("--feature-mode", train_mode, "y_pair|y_tensor|x_tensor|x1|x2");
  cmd_train->add_option("--n1", train_n1, "first conv kernel height");
  add_common(cmd_train, train_common);

  // eval
  auto* cmd_eval = app.add_subcommand("eval", "Accuracy of a checkpoint on the test split");
  std::string eval_cache, eval_ckpt;
  CommonOpts eval_common;
  cmd_eval->add_option("--cache", eval_cache, "cache directory from extract")->required();
  cmd_eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  add_common(cmd_eval, eval_common);

  // synth speakers | mixture
  auto* cmd_synth = app.add_subcommand("synth", "Generate synthetic data");
  cmd_synth->require_subcommand(1);
  auto* cmd_speakers = cmd_synth->add_subcommand(
      "speakers", "Synthetic voices as WAV files plus a manifest");
  std::string spk_out;
  int spk_n = 10, spk_train = 20, spk_test = 5;
  std::uint64_t spk_seed = 0;
  CommonOpts spk_common;
  cmd_speakers->add_option("--out", spk_out, "output directory")->required();
  cmd_speakers->add_option("--speakers", spk_n, "number of speakers");
  cmd_speakers->add_option("--train", spk_train, "training sentences per speaker");
  cmd_speakers->add_option("--test", spk_test, "test sentences per speaker");
  cmd_speakers->add_option("--seed", spk_seed, "generator seed");
  add_common(cmd_speakers, spk_common);

  auto* cmd_mixture = cmd_synth->add_subcommand(
      "mixture", "Seeded source/mixing/observation tensors");
  std::string mix_out;
  int mix_n = 4, mix_k = 2, mix_t = 2000;
  std::uint64_t mix_seed = 0;
  CommonOpts mix_common;
  cmd_mixture->add_option("--out", mix_out, "output directory")->required();
  cmd_mixture->add_option("--n", mix_n, "components per dataset");
  cmd_mixture->add_option("--k", mix_k, "number of datasets");
  cmd_mixture->add_option("--t", mix_t, "samples");
  cmd_mixture->add_option("--seed", mix_seed, "generator seed");
  add_common(cmd_mixture, mix_common);

  // gradcheck
  auto* cmd_grad = app.add_subcommand(
      "gradcheck", "Analytic derivatives vs central finite differences");
  std::string grad_target;
  int grad_instances = 20, grad_n = 8, grad_t = 6, grad_k = 2, grad_classes = 2;
  std::uint64_t grad_seed = 0;
  double tol_grad = 1e-5, tol_hess = 1e-4, tol_nn = 1e-3;
  CommonOpts grad_common;
  cmd_grad->add_option("--target", grad_target, "iva|nn")->required();
  cmd_grad->add_option("--instances", grad_instances, "random problems (iva)");
  cmd_grad->add_option("--n", grad_n, "feature dim (nn)");
  cmd_grad->add_option("--t", grad_t, "frames (nn)");
  cmd_grad->add_option("--k", grad_k, "slabs (nn)");
  cmd_grad->add_option("--classes", grad_classes, "output classes (nn)");
  cmd_grad->add_option("--seed", grad_seed, "seed");
  cmd_grad->add_option("--tol-grad", tol_grad, "gradient tolerance (iva)");
  cmd_grad->add_option("--tol-hess", tol_hess, "Hessian tolerance (iva)");
  cmd_grad->add_option("--tol", tol_nn, "parameter-gradient tolerance (nn)");
  add_common(cmd_grad, grad_common);

  // isi-bench
  auto* cmd_isi = app.add_subcommand(
      "isi-bench", "Separation quality over seeded synthetic mixtures");
  int isi_trials = 100, isi_k = 2, isi_t = 2000;
  std::vector<int> isi_dims;
  std::uint64_t isi_seed = 0;
  double isi_threshold = 0.05;
  std::string isi_csv;
  CommonOpts isi_common;
  cmd_isi->add_option("--trials", isi_trials, "number of trials");
  cmd_isi->add_option("--dims", isi_dims, "component counts to cycle through (default 3 4 5)");
  cmd_isi->add_option("--k", isi_k, "datasets per trial");
  cmd_isi->add_option("--t", isi_t, "samples per trial");
  cmd_isi->add_option("--seed", isi_seed, "base seed");
  cmd_isi->add_option("--threshold", isi_threshold, "joint ISI pass bar");
  cmd_isi->add_option("--out", isi_csv, "per-trial CSV output");
  add_common(cmd_isi, isi_common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  ConfigHandle cfg;
  if (!cfg.h) {
    std::fprintf(stderr, "error: out of memory\n");
    return 2;
  }

  if (cmd_extract->parsed()) {
    if (int rc = apply_common(cfg.h, extract_common)) return rc;
    if (int rc = print_config(cfg.h)) return rc;
    size_t n_ok = 0, n_failed = 0;
    CHECK(ivafuse_extract(cfg.h, manifest.c_str(), cache_dir.c_str(), &n_ok, &n_failed));
    std::printf("ok=%zu\nfailed=%zu\n", n_ok, n_failed);
    return 0;
  }

  if (cmd_iva->parsed()) {
    if (int rc = apply_common(cfg.h, iva_common)) return rc;
    if (int rc = print_config(cfg.h)) return rc;
    double final_cost = 0.0;
    int iters = 0;
    CHECK(ivafuse_run_iva_file(cfg.h, iva_in.c_str(), iva_y.empty() ? nullptr : iva_y.c_str(),
                               iva_w.empty() ? nullptr : iva_w.c_str(),
                               iva_trace.empty() ? nullptr : iva_trace.c_str(), &final_cost,
                               &iters));
    std::printf("iters=%d\nfinal_cost=%.17g\n", iters, final_cost);
    return 0;
  }

  if (cmd_train->parsed()) {
    if (!train_variant.empty()) CHECK(ivafuse_config_set(cfg.h, "variant", train_variant.c_str()));
    if (!train_mode.empty())
      CHECK(ivafuse_config_set(cfg.h, "feature_mode", train_mode.c_str()));
    if (train_n1 >= 0)
      CHECK(ivafuse_config_set(cfg.h, "n1", std::to_string(train_n1).c_str()));
    if (int rc = apply_common(cfg.h, train_common)) return rc;
    if (int rc = print_config(cfg.h)) return rc;
    double best = 0.0, train_acc = 0.0, loss = 0.0;
    CHECK(ivafuse_train(cfg.h, train_cache.c_str(),
                        train_metrics.empty() ? nullptr : train_metrics.c_str(),
                        train_ckpt.empty() ? nullptr : train_ckpt.c_str(), &best, &train_acc,
                        &loss));
    std::printf("best_eval_acc=%.17g\nfinal_train_acc=%.17g\nfinal_loss=%.17g\n", best,
                train_acc, loss);
    return 0;
  }

  if (cmd_eval->parsed()) {
    if (int rc = apply_common(cfg.h, eval_common)) return rc;
    if (int rc = print_config(cfg.h)) return rc;
    double acc = 0.0;
    CHECK(ivafuse_eval(cfg.h, eval_cache.c_str(), eval_ckpt.c_str(), &acc));
    std::printf("test_acc=%.17g\n", acc);
    return 0;
  }

  if (cmd_speakers->parsed()) {
    if (int rc = apply_common(cfg.h, spk_common)) return rc;
    if (int rc = print_config(cfg.h)) return rc;
    std::fprintf(stderr, "# speakers=%d train=%d test=%d seed=%" PRIu64 "\n", spk_n, spk_train,
                 spk_test, spk_seed);
    char* manifest_path = nullptr;
    CHECK(ivafuse_synth_speakers(spk_out.c_str(), spk_n, spk_train, spk_test, spk_seed,
                                 &manifest_path));
    std::printf("manifest=%s\n", manifest_path);
    ivafuse_string_free(manifest_path);
    return 0;
  }

  if (cmd_mixture->parsed()) {
    if (int rc = apply_common(cfg.h, mix_common)) return rc;
    if (int rc = print_config(cfg.h)) return rc;
    std::fprintf(stderr, "# n=%d k=%d t=%d seed=%" PRIu64 "\n", mix_n, mix_k, mix_t, mix_seed);
    CHECK(ivafuse_synth_mixture(mix_n, mix_k, mix_t, mix_seed, mix_out.c_str()));
    std::printf("sources=%s/mixture.s.bin\nmixing=%s/mixture.a.bin\nobserved=%s/mixture.x.bin\n",
                mix_out.c_str(), mix_out.c_str(), mix_out.c_str());
    return 0;
  }

  if (cmd_grad->parsed()) {
    if (grad_target == "iva") {
      if (int rc = apply_common(cfg.h, grad_common)) return rc;
      if (int rc = print_config(cfg.h)) return rc;
      std::fprintf(stderr, "# target=iva instances=%d seed=%" PRIu64 "\n", grad_instances,
                   grad_seed);
      double g = 0.0, h = 0.0;
      CHECK(ivafuse_gradcheck_iva(grad_instances, grad_seed, &g, &h));
      std::printf("max_grad_rel=%.17g\nmax_hess_rel=%.17g\n", g, h);
      if (g >= tol_grad || h >= tol_hess) {
        std::fprintf(stderr, "error: derivative mismatch above tolerance (grad %.3g vs %.3g, "
                             "hess %.3g vs %.3g)\n", g, tol_grad, h, tol_hess);
        return 2;
      }
      return 0;
    }
    if (grad_target == "nn") {
      // small-network preset; --set still wins
      const char* tiny[][2] = {{"n1", "2"}, {"n2", "2"}, {"n3", "2"}, {"D", "2"},
                               {"C1", "4"}, {"C2", "4"}, {"C3", "4"}, {"F1", "8"},
                               {"F2", "8"}};
      for (auto& kv : tiny) CHECK(ivafuse_config_set(cfg.h, kv[0], kv[1]));
      if (int rc = apply_common(cfg.h, grad_common)) return rc;
      if (int rc = print_config(cfg.h)) return rc;
      std::fprintf(stderr, "# target=nn n=%d t=%d k=%d classes=%d seed=%" PRIu64 "\n", grad_n,
                   grad_t, grad_k, grad_classes, grad_seed);
      double worst = 0.0;
      CHECK(ivafuse_gradcheck_nn(cfg.h, grad_n, grad_t, grad_k, grad_classes, grad_seed,
                                 &worst));
      std::printf("max_rel=%.17g\n", worst);
      if (worst >= tol_nn) {
        std::fprintf(stderr, "error: parameter-gradient mismatch %.3g above tolerance %.3g\n",
                     worst, tol_nn);
        return 2;
      }
      return 0;
    }
    std::fprintf(stderr, "error: --target must be iva or nn\n");
    return 1;
  }

  if (cmd_isi->parsed()) {
    if (int rc = apply_common(cfg.h, isi_common)) return rc;
    if (int rc = print_config(cfg.h)) return rc;
    std::fprintf(stderr, "# trials=%d k=%d t=%d seed=%" PRIu64 "\n", isi_trials, isi_k, isi_t,
                 isi_seed);
    double median = 0.0;
    int below = 0;
    CHECK(ivafuse_isi_bench(cfg.h, isi_dims.empty() ? nullptr : isi_dims.data(),
                            isi_dims.size(), isi_k, isi_t, isi_trials, isi_seed,
                            isi_csv.empty() ? nullptr : isi_csv.c_str(), isi_threshold,
                            &median, &below));
    std::printf("median_isi=%.17g\nbelow_threshold=%d\ntrials=%d\n", median, below, isi_trials);
    return 0;
  }

  std::fprintf(stderr, "error: no subcommand\n");
  return 1;
}
