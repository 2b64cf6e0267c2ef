#ifndef IVAFUSE_TRAINER_HPP
#define IVAFUSE_TRAINER_HPP

#include "config.hpp"

#include <string>
#include <vector>

namespace ivafuse {

enum class Split { Train, Test };

struct ManifestEntry {
  std::string path;  // resolved against the manifest's directory
  std::string speaker;
  Split split = Split::Train;
};

// CSV with header `path,speaker_id` or `path,speaker_id,split`; split
// values are train/test (default train). Every test speaker must also
// appear in train.
std::vector<ManifestEntry> load_manifest(const std::string& path);

struct PrepareResult {
  int n_ok = 0;
  int n_failed = 0;
  std::vector<std::string> errors;
};

// Runs the full per-sentence pipeline (audio -> VAD -> duration fix ->
// frames -> LPC/MFCC -> whiten -> IVA) and caches X/Y/W per sentence under
// cache_dir as <id>.x.bin / <id>.y.bin / <id>.w.bin plus index.csv.
// Aborts when more than 1% of the sentences fail.
PrepareResult prepare_dataset(const std::string& manifest_path, const std::string& cache_dir,
                              const RunConfig& cfg);

struct StoreEntry {
  int id = 0;
  std::string speaker;
  int label = 0;
  Split split = Split::Train;
  FeatureTensor x;  // fused LPC/MFCC features
  FeatureTensor y;  // separated components (demixed whiten(x))
};

struct FeatureStore {
  std::vector<StoreEntry> entries;
  int n_classes = 0;

  static FeatureStore load(const std::string& cache_dir);
};

// Network input for one sentence under the configured feature mode.
FeatureTensor select_features(const StoreEntry& e, const std::string& feature_mode);

struct TrainOptions {
  std::string metrics_path;     // CSV epoch,step,loss,train_acc,eval_acc
  std::string checkpoint_path;  // best eval accuracy snapshot
};

struct TrainResult {
  double best_eval_acc = 0.0;
  double final_train_acc = 0.0;
  double final_loss = 0.0;
};

TrainResult train_network(const FeatureStore& store, const RunConfig& cfg,
                          const TrainOptions& opts);

double evaluate_acc(Network& net, const FeatureStore& store, const std::string& feature_mode,
                    Split split, int batch_size = 32);

}  // namespace ivafuse

#endif
