#include "trainer.hpp"

#include "tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace ivafuse {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  return out;
}

std::string sentence_id(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", i);
  return buf;
}

}  // namespace

std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(Err::Io, "cannot open manifest " + path);
  fs::path base = fs::path(path).parent_path();

  std::string line;
  if (!std::getline(f, line)) fail(Err::Usage, path + ": empty manifest");
  std::vector<std::string> head = split_csv(line);
  bool has_split = head.size() == 3 && head[2] == "split";
  if (!(head.size() >= 2 && head[0] == "path" && head[1] == "speaker_id" &&
        (head.size() == 2 || has_split)))
    fail(Err::Usage, path + ": header must be path,speaker_id[,split]");

  std::vector<ManifestEntry> entries;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<std::string> cells = split_csv(line);
    if (cells.size() != head.size())
      fail(Err::Usage, path + ":" + std::to_string(lineno) + ": wrong column count");
    ManifestEntry e;
    fs::path p = cells[0];
    e.path = p.is_absolute() ? p.string() : (base / p).string();
    e.speaker = cells[1];
    if (e.speaker.empty())
      fail(Err::Usage, path + ":" + std::to_string(lineno) + ": empty speaker_id");
    if (has_split) {
      if (cells[2] == "train") e.split = Split::Train;
      else if (cells[2] == "test") e.split = Split::Test;
      else
        fail(Err::Usage,
             path + ":" + std::to_string(lineno) + ": split must be train or test");
    }
    entries.push_back(std::move(e));
  }
  if (entries.empty()) fail(Err::Usage, path + ": no records");

  std::set<std::string> train_spk, test_spk;
  for (const ManifestEntry& e : entries)
    (e.split == Split::Train ? train_spk : test_spk).insert(e.speaker);
  for (const std::string& s : test_spk)
    if (!train_spk.count(s))
      fail(Err::Usage, path + ": speaker '" + s + "' appears only in the test split");
  return entries;
}

PrepareResult prepare_dataset(const std::string& manifest_path, const std::string& cache_dir,
                              const RunConfig& cfg) {
  cfg.validate();
  std::vector<ManifestEntry> entries = load_manifest(manifest_path);
  std::error_code ec;
  fs::create_directories(cache_dir, ec);
  if (ec) fail(Err::Io, "cannot create " + cache_dir);

  const FrameConfig frame = cfg.frame();
  const IvaConfig iva = cfg.iva();
  const std::size_t n = entries.size();

  std::vector<std::string> errors(n);
  std::vector<char> ok(n, 0);
  parallel_for(n, cfg.threads, [&](std::size_t i) {
    try {
      std::vector<double> samples = load_wav(entries[i].path, cfg.sample_rate);
      samples = apply_vad(samples, frame);
      samples = fix_duration(samples, frame, child_seed(cfg.seed, 2 * i));
      Mat frames = frame_and_window(samples, frame);
      Mat x1 = lpc_features(frames, cfg.lpc_order);
      Mat x2 = mfcc_features(frames, cfg.sample_rate, cfg.n_mels, cfg.n_ceps);
      FeatureTensor x = build_tensor({x1, x2});
      std::string id = sentence_id(static_cast<int>(i));
      // x.bin keeps the plain fused features; whitening is IVA preprocessing
      // only, so the demixing in w.bin acts on whiten(x), not on x itself.
      write_tensor((fs::path(cache_dir) / (id + ".x.bin")).string(), x);
      if (!cfg.shared_demixing) {
        auto [xw, wt] = whiten(x);
        IvaConfig local = iva;
        local.seed = child_seed(cfg.seed, 2 * i + 1);
        IvaResult res = run_iva(xw, local);
        write_tensor((fs::path(cache_dir) / (id + ".y.bin")).string(), res.Y);
        write_demixing((fs::path(cache_dir) / (id + ".w.bin")).string(), res.W);
      }
      ok[i] = 1;
    } catch (const Error& e) {
      errors[i] = entries[i].path + ": " + e.what();
    }
  });

  PrepareResult result;
  for (std::size_t i = 0; i < n; ++i) {
    if (ok[i]) ++result.n_ok;
    else {
      ++result.n_failed;
      result.errors.push_back(errors[i]);
    }
  }
  if (result.n_failed > 0.01 * static_cast<double>(n)) {
    std::string msg = std::to_string(result.n_failed) + " of " + std::to_string(n) +
                      " sentences failed; first: " + result.errors.front();
    fail(Err::Io, msg);
  }

  if (cfg.shared_demixing) {
    // One demixing tensor per speaker, fitted on its training sentences and
    // applied to all of them.
    std::map<std::string, std::vector<std::size_t>> by_speaker;
    for (std::size_t i = 0; i < n; ++i)
      if (ok[i]) by_speaker[entries[i].speaker].push_back(i);
    std::size_t spk_idx = 0;
    for (auto& [speaker, ids] : by_speaker) {
      std::vector<FeatureTensor> xs(ids.size());
      int t_total = 0;
      for (std::size_t j = 0; j < ids.size(); ++j) {
        FeatureTensor raw = read_tensor(
            (fs::path(cache_dir) / (sentence_id(static_cast<int>(ids[j])) + ".x.bin"))
                .string());
        xs[j] = whiten(raw).first;
        if (entries[ids[j]].split == Split::Train) t_total += xs[j].T();
      }
      if (t_total == 0)
        fail(Err::Usage, "speaker " + speaker + " has no usable training sentences");
      FeatureTensor cat;
      for (int k = 0; k < xs[0].K(); ++k) {
        Mat slab(xs[0].N(), t_total);
        int at = 0;
        for (std::size_t j = 0; j < ids.size(); ++j) {
          if (entries[ids[j]].split != Split::Train) continue;
          slab.middleCols(at, xs[j].T()) = xs[j].slabs[k];
          at += xs[j].T();
        }
        cat.slabs.push_back(std::move(slab));
      }
      IvaConfig local = iva;
      local.seed = child_seed(cfg.seed, 0x53000000ULL + spk_idx);
      IvaResult res = run_iva(cat, local);
      for (std::size_t j = 0; j < ids.size(); ++j) {
        std::string id = sentence_id(static_cast<int>(ids[j]));
        write_tensor((fs::path(cache_dir) / (id + ".y.bin")).string(),
                     demix(res.W, xs[j]));
        write_demixing((fs::path(cache_dir) / (id + ".w.bin")).string(), res.W);
      }
      ++spk_idx;
    }
  }

  std::ofstream index((fs::path(cache_dir) / "index.csv").string());
  if (!index) fail(Err::Io, "cannot write index.csv in " + cache_dir);
  index << "id,path,speaker_id,split\n";
  for (std::size_t i = 0; i < n; ++i) {
    if (!ok[i]) continue;
    index << sentence_id(static_cast<int>(i)) << ',' << entries[i].path << ','
          << entries[i].speaker << ','
          << (entries[i].split == Split::Train ? "train" : "test") << '\n';
  }
  if (!index) fail(Err::Io, "write failed: index.csv");
  return result;
}

FeatureStore FeatureStore::load(const std::string& cache_dir) {
  std::string index_path = (fs::path(cache_dir) / "index.csv").string();
  std::ifstream f(index_path);
  if (!f) fail(Err::Io, "cannot open " + index_path);
  std::string line;
  if (!std::getline(f, line) || trim(line) != "id,path,speaker_id,split")
    fail(Err::Io, index_path + ": bad header");

  FeatureStore store;
  std::map<std::string, int> speakers;
  while (std::getline(f, line)) {
    if (trim(line).empty()) continue;
    std::vector<std::string> cells = split_csv(line);
    if (cells.size() != 4) fail(Err::Io, index_path + ": bad row");
    StoreEntry e;
    e.id = std::stoi(cells[0]);
    e.speaker = cells[2];
    e.split = cells[3] == "test" ? Split::Test : Split::Train;
    e.x = read_tensor((fs::path(cache_dir) / (cells[0] + ".x.bin")).string());
    e.y = read_tensor((fs::path(cache_dir) / (cells[0] + ".y.bin")).string());
    speakers.emplace(e.speaker, 0);
    store.entries.push_back(std::move(e));
  }
  if (store.entries.empty()) fail(Err::Io, index_path + ": no entries");

  int next = 0;
  for (auto& [name, label] : speakers) label = next++;
  for (StoreEntry& e : store.entries) e.label = speakers[e.speaker];
  store.n_classes = next;
  return store;
}

FeatureTensor select_features(const StoreEntry& e, const std::string& feature_mode) {
  if (feature_mode == "y_pair" || feature_mode == "y_tensor") return e.y;
  if (feature_mode == "x_tensor") return e.x;
  if (feature_mode == "x1") return FeatureTensor{{e.x.slabs.at(0)}};
  if (feature_mode == "x2") return FeatureTensor{{e.x.slabs.at(1)}};
  fail(Err::Usage, "unknown feature_mode '" + feature_mode + "'");
}

double evaluate_acc(Network& net, const FeatureStore& store, const std::string& feature_mode,
                    Split split, int batch_size) {
  std::vector<const StoreEntry*> subset;
  for (const StoreEntry& e : store.entries)
    if (e.split == split) subset.push_back(&e);
  if (subset.empty()) return 0.0;

  int correct = 0;
  for (std::size_t at = 0; at < subset.size(); at += batch_size) {
    std::size_t end = std::min(subset.size(), at + batch_size);
    std::vector<FeatureTensor> batch;
    std::vector<int> labels;
    for (std::size_t i = at; i < end; ++i) {
      batch.push_back(select_features(*subset[i], feature_mode));
      labels.push_back(subset[i]->label);
    }
    Mat probs = net.forward(batch, Mode::Eval);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      int pred = 0;
      probs.col(static_cast<int>(i)).maxCoeff(&pred);  // first max: lowest index wins ties
      if (pred == labels[i]) ++correct;
    }
  }
  return 100.0 * correct / static_cast<double>(subset.size());
}

TrainResult train_network(const FeatureStore& store, const RunConfig& cfg,
                          const TrainOptions& opts) {
  if (store.n_classes < 2) fail(Err::Usage, "need at least 2 speakers to train");
  NetworkSpec spec = cfg.network(store.n_classes);
  Network net(spec, child_seed(cfg.seed, 0x7e7e));

  std::vector<int> train_idx;
  bool have_test = false;
  for (std::size_t i = 0; i < store.entries.size(); ++i) {
    if (store.entries[i].split == Split::Train) train_idx.push_back(static_cast<int>(i));
    else have_test = true;
  }
  if (train_idx.size() < 2) fail(Err::Usage, "need at least 2 training sentences");

  Rng shuffle_rng = make_rng(child_seed(cfg.seed, 0x5f5f));
  std::string metrics = "epoch,step,loss,train_acc,eval_acc\n";
  TrainResult result;
  double best = -1.0;
  int global_step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), shuffle_rng);
    double loss_sum = 0.0;
    int n_batches = 0;
    for (std::size_t at = 0; at < train_idx.size(); at += cfg.batch_size) {
      std::size_t end = std::min(train_idx.size(), at + cfg.batch_size);
      if (end - at < 2) break;  // batch norm cannot train on a single item
      std::vector<FeatureTensor> batch;
      std::vector<int> labels;
      for (std::size_t i = at; i < end; ++i) {
        const StoreEntry& e = store.entries[train_idx[i]];
        batch.push_back(select_features(e, cfg.feature_mode));
        labels.push_back(e.label);
      }
      net.zero_grads();
      double loss = net.loss_and_backward(batch, labels);
      if (!std::isfinite(loss))
        fail(Err::NonFiniteLoss, "epoch " + std::to_string(epoch) + " step " +
                                     std::to_string(global_step) + ": loss is not finite");
      net.adam_step(cfg.lr);
      ++global_step;
      loss_sum += loss;
      ++n_batches;
    }
    double mean_loss = n_batches > 0 ? loss_sum / n_batches : 0.0;
    double train_acc = evaluate_acc(net, store, cfg.feature_mode, Split::Train,
                                    cfg.batch_size);
    double eval_acc = have_test
                          ? evaluate_acc(net, store, cfg.feature_mode, Split::Test,
                                         cfg.batch_size)
                          : 0.0;
    metrics += std::to_string(epoch) + "," + std::to_string(global_step) + "," +
               format_double(mean_loss) + "," + format_double(train_acc) + "," +
               format_double(eval_acc) + "\n";

    double score = have_test ? eval_acc : train_acc;
    if (score > best) {
      best = score;
      if (!opts.checkpoint_path.empty()) net.save(opts.checkpoint_path);
    }
    result.final_train_acc = train_acc;
    result.final_loss = mean_loss;
  }
  result.best_eval_acc = best < 0.0 ? 0.0 : best;

  if (!opts.metrics_path.empty()) {
    std::ofstream mf(opts.metrics_path);
    if (!mf) fail(Err::Io, "cannot open " + opts.metrics_path + " for write");
    mf << metrics;
    if (!mf) fail(Err::Io, "write failed: " + opts.metrics_path);
  }
  return result;
}

}  // namespace ivafuse
