#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "cli.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("vfm_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  static int vfm(std::vector<std::string> args) {
    args.insert(args.begin(), "vfm");
    return vfm::cli::run(args);
  }

  static std::string slurp(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  static json manifest(const std::string& out) { return json::parse(slurp(out + "/manifest.json")); }

  std::string train_small(const std::string& out, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{"train", "--kind", "gauss_mixture_2d", "--steps", "20", "--batch-size", "32",
                                  "--log-every", "10", "--out-dir", out};
    args.insert(args.end(), extra.begin(), extra.end());
    EXPECT_EQ(vfm(args), 0);
    return out + "/checkpoint.ckpt";
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, UsageErrors) {
  EXPECT_EQ(vfm({}), vfm::cli::kConfigError);
  EXPECT_EQ(vfm({"frobnicate"}), vfm::cli::kConfigError);
  EXPECT_EQ(vfm({"train", "--steps", "many"}), vfm::cli::kConfigError);
  EXPECT_EQ(vfm({"--help"}), vfm::cli::kOk);
}

TEST_F(CliTest, GenerateDataIsByteIdentical) {
  ASSERT_EQ(vfm({"generate-data", "--kind", "typed_polygon_cloud", "-n", "50", "--seed", "3", "--out-dir", path("a")}), 0);
  ASSERT_EQ(vfm({"generate-data", "--kind", "typed_polygon_cloud", "-n", "50", "--seed", "3", "--out-dir", path("b")}), 0);
  EXPECT_EQ(slurp(path("a/dataset.bin")), slurp(path("b/dataset.bin")));
  const json m = manifest(path("a"));
  EXPECT_EQ(m["command"], "generate-data");
  EXPECT_EQ(m["status"], "ok");
  EXPECT_EQ(m["seed"], 3);
  for (const char* k : {"config", "config_hash", "git_describe", "started", "finished", "outputs"}) {
    EXPECT_TRUE(m.contains(k)) << k;
  }
  // A dataset file validates under eval.
  ASSERT_EQ(vfm({"eval", "--samples", path("a/dataset.bin"), "--reference", path("a/dataset.bin"), "--min-validity",
                 "1.0", "--out-dir", path("e")}),
            0);
  EXPECT_NE(slurp(path("e/metrics.csv")).find("validity_rate,1,"), std::string::npos);
}

TEST_F(CliTest, ControlledLossNeedsLabels) {
  EXPECT_EQ(vfm({"train", "--loss", "controlled-vfm", "--steps", "5", "--out-dir", path("t")}),
            vfm::cli::kConfigError);
  EXPECT_FALSE(fs::exists(path("t/checkpoint.ckpt")));
}

TEST_F(CliTest, MissingInputsAreConfigErrors) {
  EXPECT_EQ(vfm({"eval", "--out-dir", path("e")}), vfm::cli::kConfigError);
  EXPECT_EQ(vfm({"sample", "--out-dir", path("s")}), vfm::cli::kConfigError);
  EXPECT_EQ(vfm({"sample", "--checkpoint", path("nope.ckpt"), "--out-dir", path("s")}), vfm::cli::kConfigError);
  EXPECT_EQ(vfm({"train", "--data", path("nope.bin"), "--out-dir", path("t")}), vfm::cli::kConfigError);
}

TEST_F(CliTest, TrainWritesMetricsAndManifest) {
  train_small(path("t"));
  const std::string csv = slurp(path("t/metrics.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,loss,grad_norm,seconds");
  const json m = manifest(path("t"));
  EXPECT_EQ(m["steps_done"], 20);
  EXPECT_EQ(m["outputs"], json::array({"checkpoint.ckpt", "metrics.csv"}));
}

TEST_F(CliTest, ManifestReplayIsBitIdentical) {
  const std::string ck = train_small(path("t"));
  ASSERT_EQ(vfm({"train", "--config", path("t/manifest.json"), "--out-dir", path("t2")}), 0);
  EXPECT_EQ(slurp(ck), slurp(path("t2/checkpoint.ckpt")));
  EXPECT_EQ(manifest(path("t"))["config_hash"], manifest(path("t2"))["config_hash"]);

  ASSERT_EQ(vfm({"sample", "--checkpoint", ck, "-n", "40", "--steps", "10", "--out-dir", path("s")}), 0);
  ASSERT_EQ(vfm({"sample", "--config", path("s/manifest.json"), "--out-dir", path("s2")}), 0);
  EXPECT_EQ(slurp(path("s/samples.csv")), slurp(path("s2/samples.csv")));

  // A manifest of one verb cannot drive another.
  EXPECT_EQ(vfm({"eval", "--config", path("s/manifest.json"), "--out-dir", path("x")}), vfm::cli::kConfigError);
}

TEST_F(CliTest, GuidedWithoutInnerStepsMatchesUnconditional) {
  const std::string ck = train_small(path("t"));
  ASSERT_EQ(vfm({"sample", "--checkpoint", ck, "-n", "30", "--steps", "10", "--out-dir", path("u")}), 0);
  ASSERT_EQ(vfm({"sample", "--checkpoint", ck, "-n", "30", "--steps", "10", "--mode", "guided", "--guide",
                 "component_index", "--target", "2", "--inner-steps", "0", "--out-dir", path("g")}),
            0);
  auto coords = [&](const std::string& file) {
    std::istringstream in(slurp(file));
    std::string line, out;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::size_t pos = 0;
      for (int i = 0; i < 3; ++i) pos = line.find(',', pos) + 1;
      out += line.substr(0, pos) + "\n";
    }
    return out;
  };
  EXPECT_EQ(coords(path("u/samples.csv")), coords(path("g/samples.csv")));
}

TEST_F(CliTest, ConditionedSamplesRecordLabel) {
  const std::string ck = train_small(path("t"), {"--loss", "controlled-vfm", "--labels", "property"});
  EXPECT_EQ(vfm({"sample", "--checkpoint", ck, "-n", "5", "--steps", "5", "--out-dir", path("bad")}),
            vfm::cli::kConfigError);
  ASSERT_EQ(vfm({"sample", "--checkpoint", ck, "-n", "5", "--steps", "5", "--mode", "conditioned", "--y", "3",
                 "--out-dir", path("s")}),
            0);
  const std::string csv = slurp(path("s/samples.csv"));
  EXPECT_NE(csv.substr(0, csv.find('\n')).find(",y"), std::string::npos);
  EXPECT_NE(csv.find(",conditioned,0,3\n"), std::string::npos);
}

TEST_F(CliTest, NfeFlag) {
  const std::string ck = train_small(path("t"));
  ASSERT_EQ(vfm({"sample", "--checkpoint", ck, "-n", "4", "--nfe", "100", "--out-dir", path("s")}), 0);
  const json m = manifest(path("s"));
  EXPECT_EQ(m["config"]["integrator"]["steps"], 100);
  EXPECT_EQ(m["nfe_per_chain"], 100);
  ASSERT_EQ(vfm({"sample", "--checkpoint", ck, "-n", "4", "--scheme", "rk4", "--nfe", "100", "--out-dir", path("r")}), 0);
  EXPECT_EQ(manifest(path("r"))["config"]["integrator"]["steps"], 25);
  EXPECT_EQ(vfm({"sample", "--checkpoint", ck, "-n", "4", "--scheme", "rk4", "--nfe", "10", "--out-dir", path("x")}),
            vfm::cli::kConfigError);
}

TEST_F(CliTest, EvalPropertyColumnOnlyWhenConfigured) {
  ASSERT_EQ(vfm({"generate-data", "-n", "200", "--out-dir", path("d")}), 0);
  ASSERT_EQ(vfm({"generate-data", "-n", "200", "--seed", "1", "--out-dir", path("r")}), 0);
  ASSERT_EQ(vfm({"eval", "--samples", path("d/dataset.bin"), "--reference", path("r/dataset.bin"), "--out-dir",
                 path("e1")}),
            0);
  EXPECT_EQ(slurp(path("e1/metrics.csv")).find("property_mae"), std::string::npos);
  ASSERT_EQ(vfm({"eval", "--samples", path("d/dataset.bin"), "--reference", path("r/dataset.bin"), "--property",
                 "component_index", "--target", "0", "--out-dir", path("e2")}),
            0);
  EXPECT_NE(slurp(path("e2/metrics.csv")).find("property_mae"), std::string::npos);
}

TEST_F(CliTest, EvalThresholdFailure) {
  ASSERT_EQ(vfm({"generate-data", "-n", "200", "--out-dir", path("d")}), 0);
  ASSERT_EQ(vfm({"generate-data", "-n", "200", "--seed", "1", "--out-dir", path("r")}), 0);
  EXPECT_EQ(vfm({"eval", "--samples", path("d/dataset.bin"), "--reference", path("r/dataset.bin"), "--max-sliced-w2",
                 "1e-9", "--out-dir", path("e")}),
            vfm::cli::kThresholdFailure);
  EXPECT_TRUE(fs::exists(path("e/metrics.csv")));
  EXPECT_TRUE(fs::exists(path("e/manifest.json")));
}

TEST_F(CliTest, ShippedAuditConfigs) {
  const std::string cfg = VFM_CONFIG_DIR;
  EXPECT_EQ(vfm({"equivariance-audit", "--config", cfg + "/audit_equivariant.json", "--trials", "4", "--steps", "10",
                 "--out-dir", path("a")}),
            0);
  const std::string report = slurp(path("a/audit_report.txt"));
  EXPECT_EQ(report.find("FAIL"), std::string::npos);
  EXPECT_EQ(vfm({"equivariance-audit", "--config", cfg + "/audit_mlp_negative_control.json", "--trials", "4",
                 "--steps", "10", "--out-dir", path("b")}),
            0);
  const std::string mlp = slurp(path("b/audit_report.txt"));
  EXPECT_NE(mlp.find("H1 PASS  H2 PASS  H3 FAIL"), std::string::npos);
  EXPECT_NE(mlp.find("verdict: PASS"), std::string::npos);
  // The MLP audited as if it were equivariant must fail.
  EXPECT_EQ(vfm({"equivariance-audit", "--config", cfg + "/audit_mlp_negative_control.json", "--expect",
                 "equivariant", "--trials", "4", "--steps", "10", "--out-dir", path("c")}),
            vfm::cli::kThresholdFailure);
}
