#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "blindinv/data.hpp"
#include "blindinv/experiment.hpp"
#include "blindinv/metrics.hpp"
#include "test_util.hpp"

using namespace blindinv;
using testutil::random_tensor;
namespace fs = std::filesystem;

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::vector<unsigned char> idx_header(std::uint32_t magic, std::uint32_t n, std::uint32_t h, std::uint32_t w) {
  std::vector<unsigned char> b;
  for (std::uint32_t v : {magic, n, h, w})
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>((v >> s) & 0xFF));
  return b;
}

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

CliResult cli(const std::string& args, const fs::path& dir) {
  const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string(BLINDINV_CLI) + " " + args + " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_text(out), read_text(err)};
}

io::json small_config(const fs::path& dir) {
  return {{"scenario", "deblur"},   {"seed", 5},          {"dataset_size", 64},
          {"image_size", 8},        {"gan_epochs", 1},    {"gan_batch", 32},
          {"checkpoint", (dir / "gan.bin").string()},     {"output", (dir / "out").string()},
          {"N", 2},                 {"T", 2},             {"T1", 2},
          {"T2", 2},                {"blur_size", 3},     {"blur_sigma", 1.0},
          {"trials", 2},            {"methods", {"solve", "pgd_no_forward", "wiener"}}};
}

}  // namespace

TEST(Idx, DecodesEndpointsAndCount) {
  const auto dir = testutil::temp_dir("idx");
  auto b = idx_header(kIdxImageMagic, 3, 2, 2);
  for (int k = 0; k < 3; ++k)
    for (unsigned char v : {0, 255, 51, 204}) b.push_back(v);
  write_bytes(dir / "a.idx", b);
  const auto imgs = load_idx(dir / "a.idx");
  ASSERT_EQ(imgs.size(), 3u);
  EXPECT_EQ(imgs[0].shape(), (Shape{1, 2, 2}));
  EXPECT_DOUBLE_EQ(imgs[2][0], -1.0);
  EXPECT_DOUBLE_EQ(imgs[2][1], 1.0);
  EXPECT_NEAR(imgs[2][2], -0.6, 1e-12);
  EXPECT_EQ(load_idx(dir / "a.idx", false, 2).size(), 2u);
}

TEST(Idx, RejectsBadMagicAndTruncation) {
  const auto dir = testutil::temp_dir("idx_bad");
  auto b = idx_header(0x00000801, 1, 2, 2);
  b.insert(b.end(), 4, 0);
  write_bytes(dir / "magic.idx", b);
  EXPECT_THROW(load_idx(dir / "magic.idx"), FormatError);
  auto t = idx_header(kIdxImageMagic, 2, 2, 2);
  t.insert(t.end(), 5, 0);
  write_bytes(dir / "short.idx", t);
  try {
    load_idx(dir / "short.idx");
    FAIL() << "expected a FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("expected 24 bytes, got 21"), std::string::npos) << e.what();
  }
}

TEST(Idx, DownsamplePadsAndPools) {
  const auto dir = testutil::temp_dir("idx_ds");
  std::vector<Tensor> imgs{Tensor(Shape{1, 28, 28}, 1.0)};
  save_idx(dir / "white.idx", imgs);
  const auto out = load_idx(dir / "white.idx", true);
  ASSERT_EQ(out[0].shape(), (Shape{1, 16, 16}));
  // 2 pixels of background padding fill the outer pooled ring with -1 exactly.
  EXPECT_DOUBLE_EQ(out[0][0], -1.0);
  EXPECT_DOUBLE_EQ(out[0][8 * 16 + 8], 1.0);
  EXPECT_DOUBLE_EQ(out[0][1 * 16 + 1], 1.0);
}

TEST(Pgm, HeaderAndRoundTrip) {
  const auto dir = testutil::temp_dir("pgm");
  Rng rng(1);
  const Tensor img = random_tensor({1, 3, 5}, rng);
  save_pgm(dir / "a.pgm", img);
  const std::string text = read_text(dir / "a.pgm");
  EXPECT_EQ(text.substr(0, 11), "P5\n5 3\n255\n");
  EXPECT_EQ(text.size(), 11u + 15u);
  const Tensor back = load_pgm(dir / "a.pgm");
  EXPECT_EQ(back.shape(), img.shape());
  EXPECT_LE(max_abs_diff(back, img), 1.0 / 255.0 + 1e-12);
}

TEST(Pgm, ClipsOutOfRange) {
  const auto dir = testutil::temp_dir("pgm_clip");
  save_pgm(dir / "c.pgm", Tensor::from_rows({{-3.0, 4.0}}));
  const Tensor back = load_pgm(dir / "c.pgm");
  EXPECT_EQ(back[0], -1.0);
  EXPECT_EQ(back[1], 1.0);
  write_text(dir / "p2.pgm", "P2\n1 1\n255\n0\n");
  EXPECT_THROW(load_pgm(dir / "p2.pgm"), FormatError);
}

TEST(Metrics, PsnrCapAndZero) {
  const Tensor a(Shape{4}, 0.3);
  EXPECT_EQ(psnr(a, a), kPsnrCap);
  // mse = 4 with peak 2 gives 0 dB.
  EXPECT_NEAR(psnr(Tensor(Shape{4}, -1.0), Tensor(Shape{4}, 1.0)), 0.0, 1e-12);
  Rng rng(2);
  const Tensor x = random_tensor({10}, rng), y = random_tensor({10}, rng);
  EXPECT_EQ(psnr(x, y), psnr(y, x));
  EXPECT_NEAR(psnr(x, y, 1.0), psnr(x, y) - 20.0 * std::log10(2.0), 1e-12);
}

TEST(Metrics, NccBasics) {
  Rng rng(3);
  const Tensor x = random_tensor({50}, rng);
  Tensor y = x;
  for (double& v : y.data()) v = 3.0 * v + 1.0;
  EXPECT_NEAR(ncc(x, y), 1.0, 1e-12);
  for (double& v : y.data()) v = -v;
  EXPECT_NEAR(ncc(x, y), -1.0, 1e-12);
  EXPECT_EQ(ncc(x, Tensor(Shape{50}, 2.0)), 0.0);
}

TEST(Metrics, MatchSourcesFindsPermutation) {
  Rng rng(4);
  std::vector<Tensor> truth{random_tensor({30}, rng), random_tensor({30}, rng), random_tensor({30}, rng)};
  std::vector<Tensor> est{truth[2], truth[0], truth[1]};
  for (double& v : est[0].data()) v = 2.0 * v + 0.5;  // matching ignores gain and offset
  const SourceMatch m = match_sources(est, truth);
  EXPECT_EQ(m.permutation, (std::vector<std::size_t>{1, 2, 0}));
  EXPECT_NEAR(m.mean_score(), 0.0, 1e-20);

  for (double& v : est[1].data()) v = -v;
  EXPECT_GT(match_sources(est, truth).scores[0], 1.0);
  const SourceMatch flipped = match_sources(est, truth, true);
  EXPECT_NEAR(flipped.scores[0], 0.0, 1e-20);
  EXPECT_TRUE(flipped.flipped[0]);
  EXPECT_THROW(match_sources(std::span(est).first(2), truth), std::invalid_argument);
}

TEST(Config, DefaultsAndValidation) {
  const ExperimentConfig cfg = parse_config({{"scenario", "edgemap"}, {"seed", 3}});
  EXPECT_EQ(cfg.scenario, Scenario::edgemap);
  EXPECT_EQ(cfg.n, 25u);
  EXPECT_EQ(cfg.solver.outer_epochs, 100u);
  EXPECT_EQ(cfg.solver.lr_theta, 4e-3);
  EXPECT_EQ(cfg.solver.lr_z, 3e-4);
  EXPECT_EQ(cfg.solver.alpha, 1e-4);
  EXPECT_THROW(parse_config({{"scenario", "deblur"}}), ConfigError);
  EXPECT_THROW(parse_config({{"scenario", "denoise"}, {"seed", 1}}), ConfigError);
  EXPECT_THROW(parse_config({{"scenario", "deblur"}, {"seed", 1}, {"learning_rate", 1}}), ConfigError);
  EXPECT_THROW(parse_config({{"scenario", "bss"}, {"seed", 1}, {"S", 6}}), ConfigError);
  EXPECT_THROW(parse_config({{"scenario", "deblur"}, {"seed", 1}, {"S", 2}}), ConfigError);
  EXPECT_THROW(parse_config({{"scenario", "deblur"}, {"seed", 1}, {"methods", {"magic"}}}), ConfigError);
  EXPECT_EQ(parse_config({{"scenario", "bss"}, {"seed", 1}, {"S", 3}}).solver.sources, 3u);
}

TEST(Csv, LineFormat) {
  MetricRow r;
  r.scenario = "deblur";
  r.item = 7;
  r.method = "solve";
  r.psnr = 20.5;
  r.mse = 0.25;
  r.l1 = 0.125;
  r.seed = 42;
  EXPECT_EQ(csv_line(r), "deblur,7,solve,20.5,0.25,0.125,,42,");
  r.final_loss = 1.5;
  r.runtime_ms = 3.0;
  EXPECT_EQ(csv_line(r), "deblur,7,solve,20.5,0.25,0.125,1.5,42,3");
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = testutil::temp_dir("cli");
    io::write_json(dir_ / "config.json", small_config(dir_));
    const CliResult r = cli("train-gan " + (dir_ / "config.json").string(), dir_);
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static fs::path dir_;
};
fs::path Cli::dir_;

TEST_F(Cli, RunIsReproducibleAndParallelSafe) {
  const fs::path cfg = dir_ / "config.json";
  const CliResult first = cli("run " + cfg.string(), dir_);
  ASSERT_EQ(first.code, 0) << first.err;
  const std::string csv = read_text(dir_ / "out" / "metrics.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kCsvHeader);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 2 * 3);
  EXPECT_TRUE(fs::exists(dir_ / "out" / "trial_1" / "solve" / "images" / "item_0.pgm"));
  const CliResult second = cli("run --parallel " + cfg.string(), dir_);
  ASSERT_EQ(second.code, 0) << second.err;
  EXPECT_EQ(read_text(dir_ / "out" / "metrics.csv"), csv);
  EXPECT_EQ(second.out, first.out);
}

TEST_F(Cli, EvaluateRescoresOutput) {
  const fs::path cfg = dir_ / "config.json";
  ASSERT_EQ(cli("baseline pgd_no_forward " + cfg.string(), dir_).code, 0);
  const CliResult r = cli("evaluate " + (dir_ / "out" / "trial_0" / "pgd_no_forward").string(), dir_);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("deblur,0,pgd_no_forward,"), std::string::npos) << r.out;
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(cli("", dir_).code, 2);
  EXPECT_EQ(cli("frobnicate", dir_).code, 2);

  io::json bad = small_config(dir_);
  bad["scenario"] = "denoise";
  io::write_json(dir_ / "bad_scenario.json", bad);
  EXPECT_EQ(cli("solve " + (dir_ / "bad_scenario.json").string(), dir_).code, 2);

  io::json unknown = small_config(dir_);
  unknown["N_sources"] = 2;
  io::write_json(dir_ / "unknown_key.json", unknown);
  const CliResult u = cli("solve " + (dir_ / "unknown_key.json").string(), dir_);
  EXPECT_EQ(u.code, 2);
  EXPECT_NE(u.err.find("N_sources"), std::string::npos) << u.err;

  io::json missing = small_config(dir_);
  const std::string ckpt = (dir_ / "nowhere" / "gan.bin").string();
  missing["checkpoint"] = ckpt;
  io::write_json(dir_ / "missing_ckpt.json", missing);
  const CliResult m = cli("solve " + (dir_ / "missing_ckpt.json").string(), dir_);
  EXPECT_EQ(m.code, 3);
  EXPECT_NE(m.err.find(ckpt), std::string::npos) << m.err;

  EXPECT_EQ(cli("solve " + (dir_ / "absent.json").string(), dir_).code, 3);
  EXPECT_EQ(cli("baseline fastica " + (dir_ / "config.json").string(), dir_).code, 2);
  EXPECT_EQ(cli("gradcheck --trials 3", dir_).code, 0);
}
