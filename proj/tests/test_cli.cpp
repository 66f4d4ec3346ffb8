#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(DMFUSE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

fs::path scratch() {
    static fs::path dir = [] {
        fs::path p = fs::temp_directory_path() / "dmfuse_cli_test";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return dir;
}

// small enough to train in seconds while keeping every class populated
const char* kTinyConfig =
    "seed = 7\n"
    "patients = 40\n"
    "ct_size = 16\n"
    "tile_size = 12\n"
    "tiles_per_slide = 2\n"
    "max_epochs = 2\n"
    "batch_size = 8\n"
    "ig_steps = 4\n"
    "smoothgrad_samples = 2\n"
    "insertion_steps = 4\n";

fs::path write_config(const std::string& name, const std::string& text) {
    fs::path p = scratch() / name;
    std::ofstream(p) << text;
    return p;
}

std::string read_file(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::string first_patient_id(const fs::path& data_dir) {
    std::ifstream is(data_dir / "manifest.csv");
    std::string line;
    std::getline(is, line);  // header
    std::getline(is, line);
    return line.substr(0, line.find(','));
}

}  // namespace

TEST_CASE("config and argument errors exit with code 3") {
    CHECK(run_cli("synth --config " + (scratch() / "nonexistent.cfg").string() + " --out " +
                  (scratch() / "x").string()) == 3);
    auto bad = write_config("bad.cfg", "no_such_key = 1\n");
    CHECK(run_cli("synth --config " + bad.string() + " --out " + (scratch() / "x").string()) == 3);
    auto malformed = write_config("malformed.cfg", "seed\n");
    CHECK(run_cli("synth --config " + malformed.string() + " --out " +
                  (scratch() / "x").string()) == 3);
    // missing required subcommand / option
    CHECK(run_cli("") == 3);
    CHECK(run_cli("synth") == 3);
}

TEST_CASE("missing prerequisites exit with code 4") {
    auto cfg = write_config("tiny.cfg", kTinyConfig);
    fs::path nodata = scratch() / "nodata";
    fs::create_directories(nodata);
    CHECK(run_cli("train --config " + cfg.string() + " --data " + nodata.string() + " --out " +
                  (scratch() / "run0").string()) == 4);
    CHECK(run_cli("eval --checkpoint " + (scratch() / "missing.ckpt").string() + " --data " +
                  nodata.string() + " --out " + (scratch() / "e0").string()) == 4);
    CHECK(run_cli("report " + nodata.string()) == 4);
}

TEST_CASE("synth, train, eval, explain, report round trip") {
    auto cfg = write_config("tiny.cfg", kTinyConfig);
    const fs::path data = scratch() / "data";
    REQUIRE(run_cli("synth --config " + cfg.string() + " --out " + data.string()) == 0);
    CHECK(fs::exists(data / "manifest.csv"));

    // dataset generation is reproducible byte-for-byte
    const fs::path data2 = scratch() / "data2";
    REQUIRE(run_cli("synth --config " + cfg.string() + " --out " + data2.string()) == 0);
    CHECK(read_file(data / "manifest.csv") == read_file(data2 / "manifest.csv"));

    const fs::path run = scratch() / "run";
    SUBCASE("unknown stage is a usage error") {
        CHECK(run_cli("train --config " + cfg.string() + " --data " + data.string() + " --out " +
                      run.string() + " --stage bogus") == 3);
    }
    SUBCASE("fusion before the branches is a missing prerequisite") {
        const fs::path empty_run = scratch() / "run_empty";
        CHECK(run_cli("train --config " + cfg.string() + " --data " + data.string() + " --out " +
                      empty_run.string() + " --stage fusion") == 4);
    }

    REQUIRE(run_cli("train --config " + cfg.string() + " --data " + data.string() + " --out " +
                    run.string() + " --stage all") == 0);
    for (const char* f : {"ct.ckpt", "he.ckpt", "fused.ckpt", "ct_history.csv", "he_history.csv",
                          "fused_history.csv"})
        CHECK(fs::exists(run / f));

    const fs::path evald = scratch() / "eval";
    REQUIRE(run_cli("eval --checkpoint " + (run / "fused.ckpt").string() + " --data " +
                    data.string() + " --out " + evald.string() + " --baseline " +
                    (run / "ct.ckpt").string()) == 0);
    CHECK(fs::exists(evald / "confusion.csv"));
    auto rep = nlohmann::json::parse(read_file(evald / "report.json"));
    CHECK(rep.at("accuracy").get<double>() >= 0.0);
    CHECK(rep.at("accuracy").get<double>() <= 1.0);
    CHECK(rep.at("macro_f1").get<double>() >= 0.0);
    CHECK(rep.at("per_class").size() == 5);
    CHECK(rep.at("delong").size() == 1);

    const std::string patient = first_patient_id(data);
    const fs::path exp = evald;  // report wants eval + explain outputs together
    REQUIRE(run_cli("explain --checkpoint " + (run / "fused.ckpt").string() + " --data " +
                    data.string() + " --out " + exp.string() + " --config " + cfg.string() +
                    " --method saliency --method gradcampp --patient " + patient) == 0);
    CHECK(fs::exists(exp / "summary.csv"));
    CHECK(fs::exists(exp / "iou.csv"));
    CHECK(fs::exists(exp / (patient + "_ct_saliency.pgm")));
    CHECK(fs::exists(exp / (patient + "_ct_saliency.png")));
    CHECK(fs::exists(exp / (patient + "_he_gradcampp_insertion.csv")));

    SUBCASE("explain rejects unknown methods, splits and patients") {
        CHECK(run_cli("explain --checkpoint " + (run / "fused.ckpt").string() + " --data " +
                      data.string() + " --out " + exp.string() + " --method bogus") == 3);
        CHECK(run_cli("explain --checkpoint " + (run / "fused.ckpt").string() + " --data " +
                      data.string() + " --out " + exp.string() + " --split bogus") == 3);
        CHECK(run_cli("explain --checkpoint " + (run / "fused.ckpt").string() + " --data " +
                      data.string() + " --out " + exp.string() + " --patient nobody") == 4);
    }

    REQUIRE(run_cli("report " + evald.string()) == 0);
    CHECK(fs::exists(evald / "report.md"));
    auto sum = nlohmann::json::parse(read_file(evald / "summary.json"));
    CHECK(sum.at("methods").size() == 2);
    CHECK(sum.at("classification").at("accuracy") == rep.at("accuracy"));

    // training is reproducible: retraining one branch reproduces the checkpoint
    const fs::path run2 = scratch() / "run2";
    REQUIRE(run_cli("train --config " + cfg.string() + " --data " + data.string() + " --out " +
                    run2.string() + " --stage ct") == 0);
    CHECK(read_file(run / "ct.ckpt") == read_file(run2 / "ct.ckpt"));
}
