#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "salient_teach/image_io.hpp"

using namespace salient_teach;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int status = -1;
  std::string out;
  std::string err;
};

Run run(const std::string& args, const fs::path& scratch) {
  const fs::path err_file = scratch / "stderr.txt";
  const std::string cmd = std::string(SALIENT_CLI) + " " + args + " 2>" + err_file.string();
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(err_file);
  r.err.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return r;
}

std::vector<json> json_lines(const std::string& out) {
  std::vector<json> lines;
  std::istringstream in(out);
  std::string line;
  while (std::getline(in, line)) lines.push_back(json::parse(line));
  return lines;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Frame solid(std::uint8_t r, std::uint8_t g, std::uint8_t b, std::size_t w = 48, std::size_t h = 36) {
  Frame f{w, h, std::vector<std::uint8_t>(w * h * 3)};
  for (std::size_t i = 0; i < w * h; ++i) {
    f.pixels[3 * i] = r;
    f.pixels[3 * i + 1] = g;
    f.pixels[3 * i + 2] = b;
  }
  return f;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("salient_cli_" + std::to_string(::getpid()) + "_" +
                                       ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir / "data");
    const char* names[3] = {"blue", "green", "red"};
    for (int c = 0; c < 3; ++c) {
      fs::create_directories(dir / "data" / names[c]);
      for (int i = 0; i < 6; ++i) {
        const auto hi = static_cast<std::uint8_t>(200 + 5 * i);
        const auto lo = static_cast<std::uint8_t>(4 * i);
        const Frame f = c == 0 ? solid(lo, lo, hi) : c == 1 ? solid(lo, hi, lo) : solid(hi, lo, lo);
        write_file((dir / "data" / names[c] / ("img" + std::to_string(i) + ".png")).string(), encode_png(f));
      }
    }
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string teach(const std::string& out, const std::string& extra = "") {
    return "teach --backbone test:42:8:4:4 --seed 11 --epochs 40 --lr 0.05 --data " + (dir / "data").string() +
           " --out " + (dir / out).string() + " " + extra;
  }

  fs::path dir;
};

}  // namespace

TEST_F(CliTest, TeachWritesSessionAndJsonLines) {
  const auto r = run(teach("s.json"), dir);
  ASSERT_EQ(r.status, 0) << r.err;
  const auto lines = json_lines(r.out);
  ASSERT_EQ(lines.size(), 41u);
  EXPECT_EQ(lines[0]["type"], "epoch");
  EXPECT_EQ(lines[0]["epoch"], 1);
  EXPECT_EQ(lines[40]["type"], "trained");
  EXPECT_EQ(lines[40]["counts"], (json{{"blue", 6}, {"green", 6}, {"red", 6}}));
  EXPECT_EQ(lines[40]["report"]["train_accuracy"], 1.0);
  const auto doc = json::parse(slurp(dir / "s.json"));
  EXPECT_EQ(doc["labels"][0]["name"], "blue");
  EXPECT_EQ(doc["labels"][2]["name"], "red");
  EXPECT_EQ(doc["seed"], 11);
}

TEST_F(CliTest, TeachIsDeterministic) {
  ASSERT_EQ(run(teach("a.json"), dir).status, 0);
  ASSERT_EQ(run(teach("b.json"), dir).status, 0);
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
}

TEST_F(CliTest, TeachNeedsTwoLabels) {
  fs::remove_all(dir / "data" / "green");
  fs::remove_all(dir / "data" / "red");
  const auto r = run(teach("s.json"), dir);
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("at least 2"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "s.json"));
}

TEST_F(CliTest, UnreadableImagesAreSkipped) {
  std::ofstream(dir / "data" / "red" / "broken.png") << "not an image";
  const auto r = run(teach("s.json"), dir);
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.err.find("warning"), std::string::npos);
  EXPECT_EQ(json_lines(r.out).back()["counts"]["red"], 6);

  for (const auto& e : fs::directory_iterator(dir / "data" / "green")) fs::remove(e.path());
  std::ofstream(dir / "data" / "green" / "broken.jpg") << "junk";
  const auto r2 = run(teach("t.json"), dir);
  EXPECT_NE(r2.status, 0);
  EXPECT_NE(r2.err.find("green"), std::string::npos);
}

TEST_F(CliTest, LabelManifestOverridesOrder) {
  std::ofstream(dir / "labels.txt") << "red\nblue\ngreen\n";
  ASSERT_EQ(run(teach("s.json", "--labels " + (dir / "labels.txt").string()), dir).status, 0);
  const auto doc = json::parse(slurp(dir / "s.json"));
  EXPECT_EQ(doc["labels"][0]["name"], "red");
}

TEST_F(CliTest, EvalScoresAndOverlay) {
  ASSERT_EQ(run(teach("s.json"), dir).status, 0);
  write_file((dir / "probe.png").string(), encode_png(solid(235, 8, 8, 64, 48)));
  const std::string base = "eval --backbone test:42:8:4:4 --session " + (dir / "s.json").string() + " --image " +
                           (dir / "probe.png").string();
  const auto r = run(base + " --overlay " + (dir / "ov.png").string(), dir);
  ASSERT_EQ(r.status, 0) << r.err;
  const auto line = json_lines(r.out).at(0);
  EXPECT_EQ(line["saliency_label"], "red");
  EXPECT_EQ(line["saliency_class"], 2);
  EXPECT_GT(line["scores"][2]["p"].get<double>(), 0.9);
  const Frame ov = read_image((dir / "ov.png").string());
  EXPECT_EQ(ov.width, 64u);
  EXPECT_EQ(ov.height, 48u);
  // A solid image gives a constant CAM, so the overlay is fully transparent.
  EXPECT_EQ(ov.pixels, solid(235, 8, 8, 64, 48).pixels);

  const auto chosen = run(base + " --class green", dir);
  ASSERT_EQ(chosen.status, 0);
  EXPECT_EQ(json_lines(chosen.out).at(0)["saliency_class"], 1);

  const auto bad = run(base + " --class purple", dir);
  EXPECT_NE(bad.status, 0);
  EXPECT_NE(bad.err.find("blue, green, red"), std::string::npos);
}

TEST_F(CliTest, EvalDirectory) {
  ASSERT_EQ(run(teach("s.json"), dir).status, 0);
  const auto r = run("eval --backbone test:42:8:4:4 --session " + (dir / "s.json").string() + " --image " +
                         (dir / "data" / "blue").string() + " --overlay " + (dir / "out").string(),
                     dir);
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(json_lines(r.out).size(), 6u);
  EXPECT_TRUE(fs::exists(dir / "out" / "img0.overlay.png"));
}

TEST_F(CliTest, EvalRejectsOtherBackbone) {
  ASSERT_EQ(run(teach("s.json"), dir).status, 0);
  const auto r = run("eval --backbone test:43:8:4:4 --session " + (dir / "s.json").string() + " --image " +
                         (dir / "data" / "blue" / "img0.png").string(),
                     dir);
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("compatibility"), std::string::npos);
}

TEST_F(CliTest, Bench) {
  ASSERT_EQ(run(teach("s.json"), dir).status, 0);
  const auto r = run("bench --backbone test:42:8:4:4 --n 20 --session " + (dir / "s.json").string(), dir);
  ASSERT_EQ(r.status, 0) << r.err;
  const auto doc = json_lines(r.out).at(0);
  EXPECT_EQ(doc["frames"], 20);
  EXPECT_EQ(doc["structure_ok"], 20);
  EXPECT_TRUE(doc["training_ms"].is_number());
  EXPECT_EQ(doc["retrained_head_matches"], true);
  EXPECT_TRUE(doc["total_ms"].contains("p95"));
}

TEST_F(CliTest, BenchNeedsTrainedSession) {
  const auto r = run("bench --backbone test:42:8:4:4 --session " + (dir / "missing.json").string(), dir);
  EXPECT_NE(r.status, 0);
}

TEST_F(CliTest, UsageErrors) {
  EXPECT_NE(run("", dir).status, 0);
  EXPECT_NE(run("teach --data x --out y", dir).status, 0);
  EXPECT_NE(run("teach --backbone test:1:2:2:2 --epochs 0 --data x --out y", dir).status, 0);
}
