#include "doctest.h"

#include "config.hpp"

#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using namespace ivafuse;

namespace {

void expect_usage(const std::function<void()>& fn) {
  try {
    fn();
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == Err::Usage);
  }
}

}  // namespace

TEST_CASE("defaults dump and parse back identically") {
  RunConfig a;
  fs::path dir = fs::temp_directory_path() / "ivafuse_cfg";
  fs::create_directories(dir);
  std::string path = (dir / "run.cfg").string();
  std::ofstream(path) << a.dump();

  RunConfig b;
  b.seed = 999;  // will be overwritten by the file
  b.load_file(path);
  CHECK(b.dump() == a.dump());
  fs::remove_all(dir);
}

TEST_CASE("values are parsed strictly by type") {
  RunConfig c;
  c.set("frame_len", "256");
  CHECK(c.frame_len == 256);
  c.set("lr", "0.5");
  CHECK(c.lr == 0.5);
  c.set("seed", "18446744073709551615");
  CHECK(c.seed == 18446744073709551615ull);
  c.set("shared_demixing", "true");
  CHECK(c.shared_demixing);
  c.set("shared_demixing", "0");
  CHECK(!c.shared_demixing);
  c.set("variant", "ncnn");
  CHECK(c.variant == "ncnn");

  expect_usage([&] { c.set("frame_len", "256x"); });
  expect_usage([&] { c.set("lr", "fast"); });
  expect_usage([&] { c.set("seed", "1e5"); });
  expect_usage([&] { c.set("shared_demixing", "yes"); });
  expect_usage([&] { c.set("no_such_knob", "1"); });
}

TEST_CASE("config files tolerate comments and whitespace") {
  fs::path dir = fs::temp_directory_path() / "ivafuse_cfg_file";
  fs::create_directories(dir);
  std::string path = (dir / "run.cfg").string();
  std::ofstream(path) << "# a comment\n\n  n1 = 5 \n\tepochs=3\r\n";

  RunConfig c;
  c.load_file(path);
  CHECK(c.n1 == 5);
  CHECK(c.epochs == 3);

  std::ofstream(path) << "n1\n";
  expect_usage([&] { RunConfig{}.load_file(path); });

  try {
    RunConfig{}.load_file((dir / "absent.cfg").string());
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == Err::Io);
  }
  fs::remove_all(dir);
}

TEST_CASE("framing and separation sub-configs carry the knobs over") {
  RunConfig c;
  c.frame_len = 320;
  c.frame_shift = 80;
  c.target_frames = 200;
  c.preemphasis = 0.9;
  c.vad_energy_ratio = 0.1;
  FrameConfig f = c.frame();
  CHECK(f.frame_len == 320);
  CHECK(f.frame_shift == 80);
  CHECK(f.target_frames == 200);
  CHECK(f.preemphasis == 0.9);
  CHECK(f.vad_energy_ratio == 0.1);

  c.iva_eta0 = 0.5;
  c.iva_max_iters = 7;
  c.seed = 42;
  IvaConfig iva = c.iva();
  CHECK(iva.eta0 == 0.5);
  CHECK(iva.max_iters == 7);
  CHECK(iva.seed == 42);

  c.iva_eta_decay = 2.0;
  expect_usage([&] { c.iva(); });
}

TEST_CASE("network spec follows the feature mode") {
  RunConfig c;
  NetworkSpec s = c.network(10);
  CHECK(s.variant == Variant::PCNN_I);
  CHECK(s.N == 39);
  CHECK(s.T == 300);
  CHECK(s.K == 2);
  CHECK(s.n_classes == 10);
  CHECK(s.F1 == 512);  // variant default kicks in while F1=0

  c.F1 = 128;
  CHECK(c.network(10).F1 == 128);

  c = RunConfig{};
  c.variant = "ncnn";
  c.feature_mode = "x_tensor";
  NetworkSpec ns = c.network(4);
  CHECK(ns.variant == Variant::NCNN);
  CHECK(ns.K == 2);
  CHECK(ns.F1 == 64);

  c.feature_mode = "x1";
  CHECK(c.network(4).K == 1);
  CHECK(c.network(4).N == 39);
  c.feature_mode = "x2";
  c.n_ceps = 12;
  CHECK(c.network(4).N == 36);
}

TEST_CASE("feature modes and variants must pair up") {
  RunConfig c;
  c.variant = "ncnn";
  expect_usage([&] { c.network(3); });  // y_pair needs branches

  c = RunConfig{};
  c.feature_mode = "x_tensor";
  expect_usage([&] { c.network(3); });  // stacked input needs ncnn

  c = RunConfig{};
  c.feature_mode = "sideways";
  expect_usage([&] { c.network(3); });

  // Fused modes insist on equal slab heights.
  c = RunConfig{};
  c.lpc_order = 12;
  expect_usage([&] { c.network(3); });
  c.feature_mode = "x1";
  c.variant = "ncnn";
  CHECK(c.network(3).N == 36);
}

TEST_CASE("top-level validation bounds the training knobs") {
  CHECK_NOTHROW(RunConfig{}.validate());
  RunConfig c;
  c.batch_size = 1;
  expect_usage([&] { c.validate(); });
  c = RunConfig{};
  c.epochs = 0;
  expect_usage([&] { c.validate(); });
  c = RunConfig{};
  c.lr = 0.0;
  expect_usage([&] { c.validate(); });
  c = RunConfig{};
  c.n_ceps = 40;
  expect_usage([&] { c.validate(); });
  c = RunConfig{};
  c.lpc_order = 400;
  expect_usage([&] { c.validate(); });
  c = RunConfig{};
  c.sample_rate = 0;
  expect_usage([&] { c.validate(); });
}
