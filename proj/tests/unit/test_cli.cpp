#include "abloop/cli.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>
#include <unistd.h>

using namespace abloop;
namespace fs = std::filesystem;

namespace {

const char* kMinimal = R"({"schema_version": 1, "seed": 5})";

std::string read(const fs::path& p) { return read_text_file(p.string()); }

std::string subst(std::string s, const std::string& from, const std::string& to) {
    auto at = s.find(from);
    if (at == std::string::npos) throw std::logic_error("no '" + from + "' in config");
    return s.replace(at, from.size(), to);
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);)
        if (!l.empty()) out.push_back(l);
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config parsing

TEST(Config, MinimalUsesDefaults) {
    auto c = parse_config(kMinimal);
    EXPECT_EQ(c.seed, 5u);
    EXPECT_EQ(c.train.steps, 5000);
    EXPECT_DOUBLE_EQ(c.train.learning_rate, 1e-4);
    EXPECT_EQ(c.sample.t_noise, 8);
    EXPECT_EQ(c.sample.max_cdr_edits, 4);
    EXPECT_EQ(c.campaign.num_rounds, 3);
    EXPECT_EQ(c.campaign.seeds_per_round, 2);
    EXPECT_EQ(c.data.seed, 5u);
    EXPECT_EQ(c.landscape.seed, 5u);
    EXPECT_EQ(c.schedule.steps, 100);
    EXPECT_EQ(c.ablation.modes.size(), 3u);
}

TEST(Config, MissingFieldIsNamed) {
    try {
        parse_config(R"({"schema_version": 1})");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::ConfigError);
        EXPECT_NE(std::string(e.what()).find("'seed'"), std::string::npos);
    }
}

TEST(Config, UnknownNestedKeyCarriesPathAndLine) {
    const std::string text = "{\n  \"schema_version\": 1,\n  \"seed\": 2,\n  \"campaign\": {\n    \"filter\": {\"max_charg\": 3}\n  }\n}";
    try {
        parse_config(text);
        FAIL();
    } catch (const Error& e) {
        std::string msg = e.what();
        EXPECT_EQ(e.kind(), ErrorKind::ConfigError);
        EXPECT_NE(msg.find("campaign.filter.max_charg"), std::string::npos) << msg;
        EXPECT_NE(msg.find("line 5"), std::string::npos) << msg;
    }
}

TEST(Config, RejectsBadValues) {
    auto bad = [](const std::string& text) {
        try {
            parse_config(text);
        } catch (const Error& e) {
            return e.kind() == ErrorKind::ConfigError;
        }
        return false;
    };
    EXPECT_TRUE(bad("not json"));
    EXPECT_TRUE(bad(R"({"schema_version": 2, "seed": 1})"));
    EXPECT_TRUE(bad(R"({"schema_version": 1, "seed": -1})"));
    EXPECT_TRUE(bad(R"({"schema_version": 1, "seed": 1, "train": {"steps": "many"}})"));
    EXPECT_TRUE(bad(R"({"schema_version": 1, "seed": 1, "sample": {"regions": ["H9"]}})"));
    EXPECT_TRUE(bad(R"({"schema_version": 1, "seed": 1, "sample": {"regions": ["FW"]}})"));
    EXPECT_TRUE(bad(R"({"schema_version": 1, "seed": 1, "campaign": {"generator": "evolution"}})"));
    EXPECT_TRUE(bad(R"({"schema_version": 1, "seed": 1, "campaign": {"predictor": "folded"}})"));
    EXPECT_TRUE(bad(R"({"schema_version": 1, "seed": 1, "campaign": {"num_rounds": 0}})"));
    EXPECT_TRUE(bad(R"({"schema_version": 1, "seed": 1, "ablation": {"modes": ["rotated_pose:x"]}})"));
    EXPECT_TRUE(bad(R"({"schema_version": 1, "seed": 1, "schedule": {"kind": "sigmoid"}})"));
    EXPECT_TRUE(bad(R"({"schema_version": 1, "seed": 1, "data": 3})"));
}

TEST(Config, SeedOverrideAndHash) {
    auto a = parse_config(kMinimal);
    auto b = parse_config(kMinimal, 9);
    auto c = parse_config(R"({"seed": 5, "schema_version": 1})");
    EXPECT_EQ(b.seed, 9u);
    EXPECT_EQ(b.campaign.seed, 9u);
    EXPECT_NE(a.hash(), b.hash());
    EXPECT_EQ(a.hash(), c.hash());  // key order does not matter
}

TEST(Config, RegionsAndFilter) {
    auto c = parse_config(R"({"schema_version": 1, "seed": 1,
        "sample": {"regions": ["H3", "L3"], "gamma": 2.0},
        "campaign": {"filter": {"min_charge": -1, "motifs": []}}})");
    ASSERT_EQ(c.sample.mask_selector.size(), 2u);
    EXPECT_EQ(c.sample.mask_selector[0], Region::H3);
    EXPECT_DOUBLE_EQ(c.campaign.sample.gamma, 2.0);
    EXPECT_EQ(*c.campaign.filter.min_charge, -1.0);
    EXPECT_TRUE(c.campaign.filter.motifs.empty());
}

TEST(Cli, ExitCodeTable) {
    EXPECT_EQ(cli::exit_code_for(ErrorKind::ConfigError), 2);
    EXPECT_EQ(cli::exit_code_for(ErrorKind::CorruptFile), 4);
    EXPECT_EQ(cli::exit_code_for(ErrorKind::MalformedRecord), 4);
    EXPECT_EQ(cli::exit_code_for(ErrorKind::VersionMismatch), 4);
    EXPECT_EQ(cli::exit_code_for(ErrorKind::NonFiniteGradient), 3);
    EXPECT_EQ(cli::exit_code_for(ErrorKind::NoViableCandidates), 3);
}

// ---------------------------------------------------------------------------
// End-to-end runs of the binary

class CliRun : public ::testing::Test {
protected:
    static fs::path dir_;

    static void SetUpTestSuite() {
        dir_ = fs::temp_directory_path() / ("abloop_cli_" + std::to_string(::getpid()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        write_config("tiny.json", tiny_config());
        ASSERT_EQ(run("train --config tiny.json --out train"), 0);
    }

    static void TearDownTestSuite() { fs::remove_all(dir_); }

    static std::string tiny_config() {
        return R"({"schema_version": 1, "seed": 7,
            "data": {"num_complexes": 6},
            "model": {"hidden": 16, "layers": 1, "neighbors": 8},
            "train": {"steps": 15, "batch_size": 2},
            "sample": {"num_samples": 12, "max_cdr_edits": 100},
            "campaign": {"num_rounds": 2, "designs_per_round": 6, "initial_library": 60,
                         "ensemble": {"members": 2, "hidden": 8, "epochs": 30}},
            "ablation": {"num_samples": 12, "top_k": 12, "library_size": 60}})";
    }

    static void write_config(const std::string& name, const std::string& text) {
        write_text_file((dir_ / name).string(), text);
    }

    static int run(const std::string& args) {
        std::string cmd = "cd '" + dir_.string() + "' && '" ABLOOP_CLI_PATH "' " + args + " > /dev/null 2>&1";
        int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }

    // Every file under a directory except the manifest, keyed by relative path.
    static std::map<std::string, std::string> primary(const std::string& sub) {
        std::map<std::string, std::string> out;
        for (const auto& e : fs::recursive_directory_iterator(dir_ / sub))
            if (e.is_regular_file() && e.path().filename() != "manifest.json")
                out[fs::relative(e.path(), dir_ / sub).string()] = read(e.path());
        return out;
    }
};

fs::path CliRun::dir_;

TEST_F(CliRun, TrainRerunIsByteIdentical) {
    ASSERT_EQ(run("train --config tiny.json --out train2"), 0);
    EXPECT_EQ(primary("train"), primary("train2"));
    EXPECT_TRUE(fs::exists(dir_ / "train/manifest.json"));
    auto m = nlohmann::json::parse(read(dir_ / "train/manifest.json"));
    EXPECT_EQ(m["command"], "train");
    EXPECT_EQ(m["seeds"]["seed"], 7);
    EXPECT_EQ(m["artifacts"].size(), 3u);
}

TEST_F(CliRun, LossTableSumsPerWeights) {
    auto rows = lines_of(read(dir_ / "train/loss.csv"));
    ASSERT_EQ(rows.size(), 16u);
    EXPECT_EQ(rows[0], "step,l_type,l_pos,l_orient,total");
    const LossWeights w;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        double step, type, pos, orient, total;
        ASSERT_EQ(std::sscanf(rows[i].c_str(), "%lf,%lf,%lf,%lf,%lf", &step, &type, &pos, &orient, &total), 5);
        EXPECT_EQ(step, static_cast<double>(i));
        EXPECT_NEAR(total, w.type * type + w.pos * pos + w.orient * orient, 1e-9 * std::abs(total));
    }
}

TEST_F(CliRun, ParamsCarryTrainingManifest) {
    auto p = load_params((dir_ / "train/params.bin").string());
    EXPECT_EQ(p.config.hidden, 16);
    auto tm = nlohmann::json::parse(read(dir_ / "train/training.json"));
    EXPECT_EQ(tm["manifest_hash"], hex64(p.manifest_hash));
    EXPECT_EQ(tm["optimizer"], kOptimizerName);
}

TEST_F(CliRun, OptimizeContracts) {
    ASSERT_EQ(run("optimize --config tiny.json --params train/params.bin --out opt_a"), 0);
    ASSERT_EQ(run("optimize --config tiny.json --params train/params.bin --out opt_b --gamma 0"), 0);
    ASSERT_EQ(run("optimize --config tiny.json --params train/params.bin --out opt_c --threads 3"), 0);
    const auto a = read(dir_ / "opt_a/candidates.jsonl");
    EXPECT_EQ(a, read(dir_ / "opt_b/candidates.jsonl"));
    EXPECT_EQ(a, read(dir_ / "opt_c/candidates.jsonl"));
    auto rows = lines_of(a);
    EXPECT_GE(rows.size(), 1u);
    EXPECT_LE(rows.size(), 12u);

    ASSERT_EQ(run("optimize --config tiny.json --params train/params.bin --out opt_zero --t-noise 0"), 0);
    const auto seed_seq = synth::make_synthetic_complex(0).antibody_sequence();
    auto zero = lines_of(read(dir_ / "opt_zero/candidates.jsonl"));
    ASSERT_EQ(zero.size(), 1u);
    auto j = nlohmann::json::parse(zero[0]);
    EXPECT_EQ(j["sequence"], seed_seq);
    EXPECT_EQ(j["edit_distance"], 0);
}

TEST_F(CliRun, GuidedOptimizeNeedsOracle) {
    EXPECT_EQ(run("optimize --config tiny.json --params train/params.bin --out opt_g --gamma 2"), 2);
    write_config("liab.json", subst(tiny_config(), R"("max_cdr_edits": 100)",
                                    R"("max_cdr_edits": 100, "guidance": "liability", "gamma": 1.5)"));
    EXPECT_EQ(run("optimize --config liab.json --params train/params.bin --out opt_l"), 0);
    EXPECT_NE(read(dir_ / "opt_l/candidates.jsonl"), read(dir_ / "opt_a/candidates.jsonl"));
}

TEST_F(CliRun, CampaignSingleRoundAndRerun) {
    write_config("one.json", subst(tiny_config(), R"("num_rounds": 2)", R"("num_rounds": 1)"));
    ASSERT_EQ(run("campaign --config one.json --params train/params.bin --out camp1"), 0);
    EXPECT_EQ(lines_of(read(dir_ / "camp1/rounds.jsonl")).size(), 1u);

    ASSERT_EQ(run("campaign --config tiny.json --params train/params.bin --out camp_a"), 0);
    ASSERT_EQ(run("campaign --config tiny.json --params train/params.bin --out camp_b --threads 2"), 0);
    EXPECT_EQ(primary("camp_a"), primary("camp_b"));
    EXPECT_TRUE(fs::exists(dir_ / "camp_a/config.json"));
    auto cj = nlohmann::json::parse(read(dir_ / "camp_a/campaign.json"));
    EXPECT_EQ(cj["campaign_seed"], 7);

    auto rows = lines_of(read(dir_ / "camp_a/best_so_far.csv"));
    ASSERT_EQ(rows.size(), 3u);
    double prev = -1e300;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        double v = std::stod(rows[i].substr(rows[i].find(',') + 1));
        EXPECT_GE(v, prev);
        prev = v;
    }
}

TEST_F(CliRun, RandomArmNeedsNoParams) {
    write_config("rand.json", subst(tiny_config(), R"("num_rounds": 2)",
                                    R"("num_rounds": 2, "generator": "random_mutation")"));
    EXPECT_EQ(run("campaign --config rand.json --out camp_r"), 0);
    EXPECT_EQ(run("campaign --config tiny.json --out camp_np"), 2);
}

TEST_F(CliRun, AblateReportMatchesCandidateFiles) {
    ASSERT_EQ(run("ablate --config tiny.json --params train/params.bin --out abl_one --modes ground_truth"), 0);
    auto report = lines_of(read(dir_ / "abl_one/ablation_report.csv"));
    ASSERT_EQ(report.size(), 2u);

    ASSERT_EQ(run("ablate --config tiny.json --params train/params.bin --out abl_all"), 0);
    report = lines_of(read(dir_ / "abl_all/ablation_report.csv"));
    ASSERT_EQ(report.size(), 4u);
    for (std::size_t i = 1; i < report.size(); ++i) {
        std::string mode = report[i].substr(0, report[i].find(','));
        std::vector<double> scores;
        for (const auto& l : lines_of(read(dir_ / ("abl_all/candidates_" + cli::safe_name(mode) + ".jsonl"))))
            scores.push_back(nlohmann::json::parse(l)["score"].get<double>());
        ASSERT_FALSE(scores.empty());
        AblationRow row;
        row.mode = mode;
        row.scores = scores;
        summarize(row);
        EXPECT_EQ(ablation_report_csv({row}).substr(std::string("mode,count,q1,median,q3,mean\n").size()),
                  report[i] + "\n");
    }
    ASSERT_EQ(run("ablate --config tiny.json --params train/params.bin --out abl_all2"), 0);
    EXPECT_EQ(primary("abl_all"), primary("abl_all2"));
}

TEST_F(CliRun, RankAndAssayAreReproducible) {
    ASSERT_EQ(run("optimize --config tiny.json --params train/params.bin --out opt_r"), 0);
    ASSERT_EQ(run("campaign --config tiny.json --params train/params.bin --out camp_r2"), 0);
    for (const char* out : {"rank_a", "rank_b"})
        ASSERT_EQ(run(std::string("rank --config tiny.json --oracle camp_r2/oracles/ridge.json "
                                  "--candidates opt_r/candidates.jsonl --top-k 5 --out ") + out),
                  0);
    EXPECT_EQ(primary("rank_a"), primary("rank_b"));
    auto ranked = lines_of(read(dir_ / "rank_a/ranked.csv"));
    ASSERT_GE(ranked.size(), 2u);
    EXPECT_LE(ranked.size(), 6u);

    for (const char* out : {"assay_a", "assay_b"})
        ASSERT_EQ(run(std::string("assay-sim --config tiny.json --candidates opt_r/candidates.jsonl --out ") + out), 0);
    EXPECT_EQ(primary("assay_a"), primary("assay_b"));
    auto recs = load_records((dir_ / "assay_a/records.jsonl").string());
    EXPECT_EQ(recs.size(), lines_of(read(dir_ / "opt_r/candidates.jsonl")).size());
}

TEST_F(CliRun, SynthDataFeedsTraining) {
    ASSERT_EQ(run("synth-data --config tiny.json --out data"), 0);
    auto files = primary("data");
    ASSERT_EQ(files.size(), 6u);
    auto expect = synth::make_synthetic_dataset(6, 7);
    EXPECT_EQ(files["complex_0003.cplx"], write_complex(expect[3]));
    write_config("from_dir.json", subst(tiny_config(), R"("num_complexes": 6)", R"("dir": "data")"));
    ASSERT_EQ(run("train --config from_dir.json --out train_dir"), 0);
    // Complex files store coordinates at fixed precision, so losses agree closely but not bitwise.
    auto from_dir = lines_of(read(dir_ / "train_dir/loss.csv"));
    auto in_memory = lines_of(read(dir_ / "train/loss.csv"));
    ASSERT_EQ(from_dir.size(), in_memory.size());
    for (std::size_t i = 1; i < from_dir.size(); ++i) {
        double a = std::stod(from_dir[i].substr(from_dir[i].rfind(',') + 1));
        double b = std::stod(in_memory[i].substr(in_memory[i].rfind(',') + 1));
        EXPECT_NEAR(a, b, 1e-5 * std::abs(b));
    }
}

TEST_F(CliRun, ExitCodes) {
    write_config("missing.json", R"({"schema_version": 1})");
    write_config("unknown.json", R"({"schema_version": 1, "seed": 1, "sampel": {}})");
    write_text_file((dir_ / "junk.bin").string(), "not a parameter file");
    write_text_file((dir_ / "bad.jsonl").string(), "{\"sequence\": \"AC\"}\n{oops\n");
    EXPECT_EQ(run("train --config missing.json --out x"), 2);
    EXPECT_EQ(run("train --config unknown.json --out x"), 2);
    EXPECT_EQ(run("train --config tiny.json"), 2);
    EXPECT_EQ(run("frobnicate"), 2);
    EXPECT_EQ(run("ablate --config tiny.json --params train/params.bin --out x --modes sideways"), 2);
    EXPECT_EQ(run("optimize --config tiny.json --params junk.bin --out x"), 4);
    EXPECT_EQ(run("rank --config tiny.json --oracle junk.bin --candidates bad.jsonl --out x"), 4);
    EXPECT_EQ(run("assay-sim --config tiny.json --candidates bad.jsonl --out x"), 4);
    EXPECT_EQ(run("--help"), 0);
}
