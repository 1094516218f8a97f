#include "catch_amalgamated.hpp"

#include "smb/cli.hpp"
#include "smb/config.hpp"
#include "smb/error.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using smb::cli::ExitCode;

namespace {

const char* kTinyConfig = R"(# small end-to-end run
sim.patients = 60
sim.horizon_days = 365
model.hidden = 16
model.layers = 1
model.heads = 2
model.max_len = 64
predictor.depth = 1
predictor.heads = 2
train.steps = 4
train.batch_size = 2
eval.max_iters = 50
)";

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result smb_run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = smb::cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) {
        out.push_back(line);
    }
    return out;
}

std::string column(const std::string& line, std::size_t k) {
    std::size_t start = 0;
    for (std::size_t i = 0; i < k; ++i) {
        start = line.find('\t', start) + 1;
    }
    return line.substr(start, line.find('\t', start) - start);
}

// Fresh run root holding tiny.txt; generated and ingested when asked.
fs::path fresh_root(const std::string& name, bool with_data) {
    const auto root = fs::temp_directory_path() / ("smb_cli_" + name);
    fs::remove_all(root);
    fs::create_directories(root);
    ::setenv("SMB_RUN_ROOT", root.c_str(), 1);
    std::ofstream(root / "tiny.txt") << kTinyConfig;
    if (with_data) {
        REQUIRE(smb_run({"generate", "--config", "tiny.txt"}).code == ExitCode::ok);
        REQUIRE(smb_run({"ingest", "--config", "tiny.txt"}).code == ExitCode::ok);
    }
    return root;
}

} // namespace

TEST_CASE("generate is deterministic and validates the regime", "[cli][generate]") {
    const auto root = fresh_root("generate", false);
    REQUIRE(smb_run({"generate", "--config", "tiny.txt", "--seed", "7", "--out", "a"}).code == ExitCode::ok);
    REQUIRE(smb_run({"generate", "--config", "tiny.txt", "--seed", "7", "--out", "b"}).code == ExitCode::ok);
    for (const char* f : {"events.tsv", "labels.tsv", "latents.tsv"}) {
        CHECK(slurp(root / "a" / f) == slurp(root / "b" / f));
        CHECK_FALSE(slurp(root / "a" / f).empty());
    }
    REQUIRE(smb_run({"generate", "--config", "tiny.txt", "--regime", "acute", "--out", "c"}).code == ExitCode::ok);
    CHECK(slurp(root / "c" / "events.tsv").starts_with("A000000"));

    const auto bad = smb_run({"generate", "--regime", "subacute", "--out", "d"});
    CHECK(bad.code == ExitCode::usage);
    CHECK_THAT(bad.err, Catch::Matchers::ContainsSubstring("subacute"));
    CHECK(smb_run({"generate", "--no-such-flag"}).code == ExitCode::usage);
    CHECK(smb_run({}).code == ExitCode::usage);
    fs::remove_all(root);
}

TEST_CASE("unknown configuration keys are rejected", "[cli][config]") {
    const auto root = fresh_root("config", false);
    std::ofstream(root / "bad.txt") << "sim.patients = 30\n\nmodel.hiden = 16\n";
    const auto r = smb_run({"generate", "--config", "bad.txt"});
    CHECK(r.code == ExitCode::usage);
    CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring("model.hiden") && Catch::Matchers::ContainsSubstring("3"));
    CHECK(smb_run({"generate", "--config", "tiny.txt", "--sim.bogus", "1"}).code == ExitCode::usage);
    CHECK_THROWS_AS(smb::config::Config::parse("train.steps = many\n", "inline").training(), smb::UsageError);
    fs::remove_all(root);
}

TEST_CASE("train writes a self-describing run and refuses reuse", "[cli][train]") {
    const auto root = fresh_root("train", true);
    const auto r = smb_run({"train", "--config", "tiny.txt", "--run", "runs/cur", "--mode", "curriculum", "--switch",
                            "0.5"});
    REQUIRE(r.code == ExitCode::ok);
    const auto run = root / "runs" / "cur";
    const auto metrics = lines(slurp(run / "metrics.tsv"));
    REQUIRE(metrics.size() == 4);
    CHECK(column(metrics[1], 2).empty());
    CHECK_FALSE(column(metrics[2], 2).empty());
    CHECK(fs::exists(run / "step_4.ckpt"));
    CHECK(slurp(run / "version.txt").starts_with("smb "));
    const auto echoed = smb::config::Config::load(run / "config.txt");
    CHECK(echoed.get("train.mode") == "curriculum");
    CHECK(echoed.get("sim.patients") == "60");

    const auto again = smb_run({"train", "--config", "tiny.txt", "--run", "runs/cur"});
    CHECK(again.code == ExitCode::usage);
    CHECK_THAT(again.err, Catch::Matchers::ContainsSubstring("--overwrite"));
    CHECK(lines(slurp(run / "metrics.tsv")).size() == 4);

    REQUIRE(smb_run({"train", "--config", "tiny.txt", "--run", "runs/cur", "--mode", "sft_only", "--overwrite"}).code ==
            ExitCode::ok);
    for (const auto& line : lines(slurp(run / "metrics.tsv"))) {
        CHECK(column(line, 2).empty());
    }

    const auto missing = smb_run({"train", "--config", "tiny.txt", "--run", "runs/x", "--data", "nowhere"});
    CHECK(missing.code == ExitCode::data);
    CHECK_THAT(missing.err, Catch::Matchers::ContainsSubstring("nowhere"));
    fs::remove_all(root);
}

TEST_CASE("eval honours pooling and names a missing label file", "[cli][eval]") {
    const auto root = fresh_root("eval", true);
    REQUIRE(smb_run({"train", "--config", "tiny.txt", "--run", "r"}).code == ExitCode::ok);
    const auto e = smb_run({"eval", "--run", "r", "--pooling", "mean", "--out", "rep"});
    REQUIRE(e.code == ExitCode::ok);
    const auto report = slurp(root / "rep" / "report.tsv");
    CHECK_THAT(report, Catch::Matchers::ContainsSubstring("# pooling=mean"));
    CHECK(fs::exists(root / "rep" / "report.json"));
    REQUIRE(smb_run({"eval", "--run", "r"}).code == ExitCode::ok);
    CHECK_THAT(slurp(root / "r" / "report.tsv"), Catch::Matchers::ContainsSubstring("# pooling=last"));

    CHECK(smb_run({"eval", "--run", "r", "--pooling", "max"}).code == ExitCode::usage);
    CHECK(smb_run({"eval", "--run", "r", "--checkpoint", "r/step_99.ckpt"}).code == ExitCode::data);

    fs::remove(root / "data" / "labels.tsv");
    const auto missing = smb_run({"eval", "--run", "r"});
    CHECK(missing.code == ExitCode::data);
    CHECK_THAT(missing.err, Catch::Matchers::ContainsSubstring("labels.tsv"));
    fs::remove_all(root);
}

TEST_CASE("ablate grid handling", "[cli][ablate]") {
    const auto root = fresh_root("ablate", true);
    const auto empty = smb_run({"ablate", "--config", "tiny.txt", "--run", "abl", "--axis", "train.mask_ratio="});
    CHECK(empty.code == ExitCode::usage);
    CHECK(smb_run({"ablate", "--config", "tiny.txt", "--run", "abl"}).code == ExitCode::usage);
    CHECK(smb_run({"ablate", "--config", "tiny.txt", "--run", "abl", "--axis", "train.nothing=1,2"}).code ==
          ExitCode::usage);

    const auto two = smb_run({"ablate", "--config", "tiny.txt", "--run", "abl", "--axis", "loss_ratio=1:2,2:1"});
    REQUIRE(two.code == ExitCode::ok);
    CHECK(fs::exists(root / "abl" / "cell_0" / "report.tsv"));
    CHECK(fs::exists(root / "abl" / "cell_1" / "report.tsv"));
    const auto table = lines(slurp(root / "abl" / "ablation.tsv"));
    REQUIRE(table.size() == 3);
    CHECK(column(table[1], 3) == "1:2");
    CHECK(column(table[2], 3) == "2:1");
    CHECK(smb::config::Config::load(root / "abl" / "cell_0" / "config.txt").get("train.lambda_sft") == "2");
    fs::remove_all(root);
}

TEST_CASE("gradcheck exit status", "[cli][gradcheck]") {
    const auto good = smb_run({"gradcheck"});
    CHECK(good.code == ExitCode::ok);
    CHECK_THAT(good.out, Catch::Matchers::ContainsSubstring("max_rel_err"));
    CHECK_THAT(good.out, !Catch::Matchers::ContainsSubstring("FAIL"));
    const auto bad = smb_run({"gradcheck", "--inject-bug"});
    CHECK(bad.code != ExitCode::ok);
    CHECK_THAT(bad.out, Catch::Matchers::ContainsSubstring("FAIL"));
}
