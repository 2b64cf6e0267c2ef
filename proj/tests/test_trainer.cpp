#include "doctest.h"

#include "synth.hpp"
#include "tensor_io.hpp"
#include "trainer.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using namespace ivafuse;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream(path) << text;
}

// Small config that keeps the per-sentence separation cheap.
RunConfig fast_cfg() {
  RunConfig cfg;
  cfg.iva_max_iters = 30;
  cfg.seed = 5;
  return cfg;
}

// One tiny corpus + cache shared by the heavier cases below.
struct Corpus {
  fs::path wav_dir, cache_dir;
  std::string manifest;

  Corpus() {
    wav_dir = fs::temp_directory_path() / "ivafuse_trainer_wavs";
    cache_dir = fs::temp_directory_path() / "ivafuse_trainer_cache";
    fs::remove_all(wav_dir);
    fs::remove_all(cache_dir);
    manifest = gen_synth_speakers(wav_dir.string(), 2, 2, 1, 13);
    PrepareResult r = prepare_dataset(manifest, cache_dir.string(), fast_cfg());
    REQUIRE(r.n_ok == 6);
    REQUIRE(r.n_failed == 0);
  }
};

const Corpus& corpus() {
  static Corpus c;
  return c;
}

}  // namespace

TEST_CASE("manifest rows resolve against the manifest directory") {
  fs::path dir = fs::temp_directory_path() / "ivafuse_trainer_manifest";
  fs::remove_all(dir);
  write_text(dir / "m.csv",
             "path,speaker_id,split\n"
             "a.wav,s0,train\n"
             "sub/b.wav,s1,train\n"
             "c.wav,s0,test\n");
  std::vector<ManifestEntry> m = load_manifest((dir / "m.csv").string());
  REQUIRE(m.size() == 3);
  CHECK(m[0].path == (dir / "a.wav").string());
  CHECK(m[1].path == (dir / "sub/b.wav").string());
  CHECK(m[0].speaker == "s0");
  CHECK(m[1].split == Split::Train);
  CHECK(m[2].split == Split::Test);

  // Two-column form defaults everything to train.
  write_text(dir / "m2.csv", "path,speaker_id\na.wav,s0\nb.wav,s1\n");
  std::vector<ManifestEntry> m2 = load_manifest((dir / "m2.csv").string());
  REQUIRE(m2.size() == 2);
  CHECK(m2[0].split == Split::Train);
  fs::remove_all(dir);
}

TEST_CASE("manifest parsing rejects malformed inputs") {
  fs::path dir = fs::temp_directory_path() / "ivafuse_trainer_manifest_bad";
  fs::remove_all(dir);
  auto expect = [&](const std::string& text, Err code) {
    write_text(dir / "m.csv", text);
    try {
      load_manifest((dir / "m.csv").string());
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == code);
    }
  };
  expect("file,speaker\na.wav,s0\n", Err::Usage);
  expect("path,speaker_id\na.wav\n", Err::Usage);
  expect("path,speaker_id\na.wav,\n", Err::Usage);
  expect("path,speaker_id,split\na.wav,s0,dev\n", Err::Usage);
  expect("path,speaker_id,split\na.wav,s0,test\n", Err::Usage);  // test-only speaker
  expect("path,speaker_id\n", Err::Usage);
  try {
    load_manifest((dir / "absent.csv").string());
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == Err::Io);
  }
  fs::remove_all(dir);
}

TEST_CASE("dataset preparation fills a complete cache") {
  const Corpus& c = corpus();
  CHECK(fs::exists(c.cache_dir / "index.csv"));
  for (int i = 0; i < 6; ++i) {
    char id[8];
    std::snprintf(id, sizeof(id), "%06d", i);
    CHECK(fs::exists(c.cache_dir / (std::string(id) + ".x.bin")));
    CHECK(fs::exists(c.cache_dir / (std::string(id) + ".y.bin")));
    CHECK(fs::exists(c.cache_dir / (std::string(id) + ".w.bin")));
  }

  std::istringstream index(slurp((c.cache_dir / "index.csv").string()));
  std::string line;
  REQUIRE(std::getline(index, line));
  CHECK(line == "id,path,speaker_id,split");
  int rows = 0;
  while (std::getline(index, line)) ++rows;
  CHECK(rows == 6);
}

TEST_CASE("cached separation satisfies y = w whiten(x)") {
  const Corpus& c = corpus();
  FeatureTensor x = read_tensor((c.cache_dir / "000000.x.bin").string());
  FeatureTensor y = read_tensor((c.cache_dir / "000000.y.bin").string());
  std::vector<Mat> w = read_demixing((c.cache_dir / "000000.w.bin").string());
  REQUIRE(x.K() == 2);
  REQUIRE(static_cast<int>(w.size()) == 2);
  CHECK(x.N() == 39);
  CHECK(x.T() == 300);

  // x.bin holds the plain fused features (not whitened): per-slab covariance
  // is far from identity, and the stored demixing applies to whiten(x).
  bool any_unwhitened = false;
  for (int k = 0; k < 2; ++k) {
    Mat centered = x.slabs[k].colwise() - x.slabs[k].rowwise().mean();
    Mat cov = centered * centered.transpose() / 300.0;
    if ((cov - Mat::Identity(39, 39)).cwiseAbs().maxCoeff() > 0.5) any_unwhitened = true;
  }
  CHECK(any_unwhitened);

  FeatureTensor xw = whiten(x).first;
  for (int k = 0; k < 2; ++k)
    CHECK((y.slabs[k] - w[k] * xw.slabs[k]).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("dataset preparation is byte-deterministic") {
  const Corpus& c = corpus();
  fs::path again = fs::temp_directory_path() / "ivafuse_trainer_cache2";
  fs::remove_all(again);
  PrepareResult r = prepare_dataset(c.manifest, again.string(), fast_cfg());
  CHECK(r.n_ok == 6);
  CHECK(slurp((c.cache_dir / "index.csv").string()) == slurp((again / "index.csv").string()));
  for (const char* name : {"000000.x.bin", "000003.y.bin", "000005.w.bin"})
    CHECK(slurp((c.cache_dir / name).string()) == slurp((again / name).string()));
  fs::remove_all(again);
}

TEST_CASE("shared demixing reuses one demixer per speaker") {
  const Corpus& c = corpus();
  fs::path shared = fs::temp_directory_path() / "ivafuse_trainer_cache_shared";
  fs::remove_all(shared);
  RunConfig cfg = fast_cfg();
  cfg.shared_demixing = true;
  PrepareResult r = prepare_dataset(c.manifest, shared.string(), cfg);
  CHECK(r.n_ok == 6);

  // Sentences 0-2 belong to the first speaker, 3-5 to the second.
  std::string w0 = slurp((shared / "000000.w.bin").string());
  CHECK(w0 == slurp((shared / "000001.w.bin").string()));
  CHECK(w0 == slurp((shared / "000002.w.bin").string()));
  std::string w3 = slurp((shared / "000003.w.bin").string());
  CHECK(w3 == slurp((shared / "000005.w.bin").string()));
  CHECK(w0 != w3);

  FeatureTensor xw = whiten(read_tensor((shared / "000002.x.bin").string())).first;
  FeatureTensor y = read_tensor((shared / "000002.y.bin").string());
  std::vector<Mat> w = read_demixing((shared / "000002.w.bin").string());
  for (int k = 0; k < 2; ++k)
    CHECK((y.slabs[k] - w[k] * xw.slabs[k]).cwiseAbs().maxCoeff() < 1e-4);
  fs::remove_all(shared);
}

TEST_CASE("preparation aborts when sentences are broken") {
  fs::path dir = fs::temp_directory_path() / "ivafuse_trainer_broken";
  fs::remove_all(dir);
  write_text(dir / "m.csv", "path,speaker_id\nmissing1.wav,s0\nmissing2.wav,s1\n");
  try {
    prepare_dataset((dir / "m.csv").string(), (dir / "cache").string(), fast_cfg());
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == Err::Io);
  }
  fs::remove_all(dir);
}

TEST_CASE("the feature store loads labels in sorted speaker order") {
  const Corpus& c = corpus();
  FeatureStore store = FeatureStore::load(c.cache_dir.string());
  REQUIRE(store.entries.size() == 6);
  CHECK(store.n_classes == 2);
  int train = 0, test = 0;
  for (const StoreEntry& e : store.entries) {
    CHECK(e.label == (e.speaker == "spk000" ? 0 : 1));
    CHECK(e.x.K() == 2);
    CHECK(e.y.K() == 2);
    (e.split == Split::Train ? train : test) += 1;
  }
  CHECK(train == 4);
  CHECK(test == 2);
}

TEST_CASE("feature selection routes modes to the right slabs") {
  StoreEntry e;
  e.x.slabs = {Mat::Constant(2, 2, 1.0), Mat::Constant(2, 2, 2.0)};
  e.y.slabs = {Mat::Constant(2, 2, 3.0), Mat::Constant(2, 2, 4.0)};
  for (const char* mode : {"y_pair", "y_tensor"}) {
    FeatureTensor f = select_features(e, mode);
    REQUIRE(f.K() == 2);
    CHECK(f.slabs[0](0, 0) == 3.0);
    CHECK(f.slabs[1](0, 0) == 4.0);
  }
  CHECK(select_features(e, "x_tensor").slabs[1](0, 0) == 2.0);
  FeatureTensor x1 = select_features(e, "x1");
  REQUIRE(x1.K() == 1);
  CHECK(x1.slabs[0](0, 0) == 1.0);
  CHECK(select_features(e, "x2").slabs[0](0, 0) == 2.0);
  CHECK_THROWS_AS(select_features(e, "slab9"), Error);
}

TEST_CASE("training writes deterministic metrics and a loadable checkpoint") {
  const Corpus& c = corpus();
  FeatureStore store = FeatureStore::load(c.cache_dir.string());

  RunConfig cfg = fast_cfg();
  cfg.variant = "pcnn-i";
  cfg.feature_mode = "y_pair";
  cfg.n1 = 2;
  cfg.n2 = 2;
  cfg.n3 = 2;
  cfg.D = 2;
  cfg.C1 = 4;
  cfg.C2 = 4;
  cfg.C3 = 4;
  cfg.F1 = 16;
  cfg.F2 = 16;
  cfg.batch_size = 4;
  cfg.epochs = 3;

  fs::path dir = fs::temp_directory_path() / "ivafuse_trainer_run";
  fs::remove_all(dir);
  fs::create_directories(dir);
  TrainOptions opts;
  opts.metrics_path = (dir / "metrics.csv").string();
  opts.checkpoint_path = (dir / "best.bin").string();
  TrainResult res = train_network(store, cfg, opts);

  CHECK(std::isfinite(res.final_loss));
  CHECK(res.final_train_acc >= 0.0);
  CHECK(res.final_train_acc <= 100.0);
  CHECK(res.best_eval_acc >= 0.0);
  CHECK(res.best_eval_acc <= 100.0);

  std::istringstream metrics(slurp(opts.metrics_path));
  std::string line;
  REQUIRE(std::getline(metrics, line));
  CHECK(line == "epoch,step,loss,train_acc,eval_acc");
  int rows = 0;
  int epoch, step;
  char comma;
  while (std::getline(metrics, line)) {
    std::istringstream row(line);
    row >> epoch >> comma >> step;
    CHECK(epoch == rows + 1);
    ++rows;
  }
  CHECK(rows == 3);  // one row per epoch
  CHECK(step == 3);  // one optimizer step per epoch at this batch size

  Network best = Network::load(opts.checkpoint_path);
  CHECK(best.spec().variant == Variant::PCNN_I);
  CHECK(best.spec().n_classes == 2);
  double acc = evaluate_acc(best, store, cfg.feature_mode, Split::Test);
  CHECK(acc == res.best_eval_acc);  // best snapshot is the checkpointed one

  // Same store, same config: identical metrics bytes.
  TrainOptions opts2;
  opts2.metrics_path = (dir / "metrics2.csv").string();
  train_network(store, cfg, opts2);
  CHECK(slurp(opts.metrics_path) == slurp(opts2.metrics_path));
  fs::remove_all(dir);
}

TEST_CASE("training validates the store and split sizes") {
  const Corpus& c = corpus();
  FeatureStore store = FeatureStore::load(c.cache_dir.string());
  RunConfig cfg = fast_cfg();
  cfg.variant = "ncnn";
  cfg.feature_mode = "x_tensor";
  cfg.C3 = 4;
  cfg.F1 = 8;
  cfg.F2 = 8;
  cfg.epochs = 1;

  FeatureStore one;
  one.n_classes = 1;
  for (const StoreEntry& e : store.entries)
    if (e.label == 0) one.entries.push_back(e);
  CHECK_THROWS_AS(train_network(one, cfg, {}), Error);

  FeatureStore thin = store;
  thin.entries.resize(1);
  CHECK_THROWS_AS(train_network(thin, cfg, {}), Error);
}

TEST_CASE("evaluation returns zero when a split is empty") {
  const Corpus& c = corpus();
  FeatureStore store = FeatureStore::load(c.cache_dir.string());
  FeatureStore train_only = store;
  std::erase_if(train_only.entries, [](const StoreEntry& e) { return e.split == Split::Test; });

  RunConfig cfg = fast_cfg();
  cfg.variant = "ncnn";
  cfg.feature_mode = "x_tensor";
  cfg.C3 = 4;
  cfg.F1 = 8;
  cfg.F2 = 8;
  Network net(cfg.network(2), 77);
  CHECK(evaluate_acc(net, train_only, "x_tensor", Split::Test) == 0.0);
  double acc = evaluate_acc(net, train_only, "x_tensor", Split::Train);
  CHECK(acc >= 0.0);
  CHECK(acc <= 100.0);
}
