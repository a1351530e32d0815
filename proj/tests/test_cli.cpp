#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

const char* kCli = QG_CLI_PATH;

struct RunResult {
  int exit_code = -1;
  std::string stdout_text;
};

// Shell out to the CLI binary, capturing stdout.
RunResult run_cli(const std::string& args, const fs::path& workdir) {
  const fs::path out_file = workdir / "stdout.txt";
  const std::string cmd = "cd '" + workdir.string() + "' && '" + std::string(kCli) + "' " +
                          args + " > '" + out_file.string() + "' 2> stderr.txt";
  const int raw = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(out_file);
  std::stringstream ss;
  ss << in.rdbuf();
  r.stdout_text = ss.str();
  return r;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("qg_cli_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Small model geometry so CLI runs stay fast.
void write_tiny_config(const fs::path& p, const std::string& extra = "") {
  std::ofstream out(p);
  out << "# tiny geometry for tests\n"
      << "input_size = 16\n"
      << "patch_size = 1\n"
      << "stage_channels = 4,8,10,16\n"
      << "stage_heads = 1,2,5,8\n"
      << "stage_depths = 1,1,1,1\n"
      << "sra_ratios = 8,4,2,1\n"
      << "aggregator_dim = 16\n"
      << "aggregator_depth = 1\n"
      << "aggregator_heads = 2\n"
      << "head_hidden = 8\n"
      << "batch_size = 8\n"
      << extra;
}

}  // namespace

TEST_CASE("synth writes a reproducible dataset") {
  TempDir dir;
  RunResult a = run_cli("synth --out da --n 10 --side 32 --modality cip --seed 7", dir.path);
  CHECK(a.exit_code == 0);
  CHECK(a.stdout_text.find("[config] command = synth") != std::string::npos);
  CHECK(fs::exists(dir.path / "da" / "scores.csv"));
  int pgms = 0;
  for (const auto& e : fs::directory_iterator(dir.path / "da")) {
    if (e.path().extension() == ".pgm") ++pgms;
  }
  CHECK(pgms == 10);

  RunResult b = run_cli("synth --out db --n 10 --side 32 --modality cip --seed 7", dir.path);
  CHECK(b.exit_code == 0);
  CHECK(read_file(dir.path / "da" / "scores.csv") == read_file(dir.path / "db" / "scores.csv"));
  CHECK(read_file(dir.path / "da" / "img00003.pgm") ==
        read_file(dir.path / "db" / "img00003.pgm"));
}

TEST_CASE("synth ge scores sit on the half-point level grid") {
  TempDir dir;
  CHECK(run_cli("synth --out ge --n 30 --side 32 --modality ge --seed 3", dir.path).exit_code == 0);
  std::ifstream in(dir.path / "ge" / "scores.csv");
  std::string line;
  std::getline(in, line);  // header
  int rows = 0;
  while (std::getline(in, line)) {
    const double score = std::stod(line.substr(line.find(',') + 1));
    CHECK(score >= 0.0);
    CHECK(score <= 8.0);
    const double doubled = score * 2.0;
    CHECK(doubled == static_cast<long>(doubled));  // multiples of 0.5
    ++rows;
  }
  CHECK(rows == 30);
}

TEST_CASE("train smoke run produces checkpoint, metrics and the audit block") {
  TempDir dir;
  REQUIRE(run_cli("synth --out d --n 16 --side 16 --modality cip --seed 1", dir.path).exit_code == 0);
  write_tiny_config(dir.path / "tiny.cfg");
  RunResult r = run_cli("train --data d --config tiny.cfg --epochs 2 --seed 5 --out m.ckpt",
                        dir.path);
  CHECK(r.exit_code == 0);
  CHECK(r.stdout_text.find("[config] command = train") != std::string::npos);
  CHECK(r.stdout_text.find("[config] transmix = on") != std::string::npos);
  CHECK(fs::exists(dir.path / "m.ckpt"));
  CHECK(fs::exists(dir.path / "m.metrics.csv"));
  const std::string metrics = read_file(dir.path / "m.metrics.csv");
  CHECK(metrics.find("epoch,split,mae,pc,ae_sd,lr,loss") == 0);

  // ablation switches parse and run
  RunResult gap = run_cli(
      "train --data d --config tiny.cfg --epochs 1 --seed 5 --aggregator gap --out g.ckpt",
      dir.path);
  CHECK(gap.exit_code == 0);
  CHECK(gap.stdout_text.find("aggregator = gap") != std::string::npos);

  RunResult no_mix = run_cli(
      "train --data d --config tiny.cfg --epochs 1 --seed 5 --no-transmix --out n.ckpt",
      dir.path);
  CHECK(no_mix.exit_code == 0);
  CHECK(no_mix.stdout_text.find("transmix = off") != std::string::npos);
}

TEST_CASE("train supports the region-count ablation") {
  TempDir dir;
  REQUIRE(run_cli("synth --out d48 --n 12 --side 48 --modality cip --seed 2", dir.path).exit_code ==
          0);
  write_tiny_config(dir.path / "t48.cfg", "input_size = 48\n");
  RunResult two = run_cli(
      "train --data d48 --config t48.cfg --epochs 1 --seed 5 --regions 2 --out r2.ckpt", dir.path);
  CHECK(two.exit_code == 0);
  CHECK(two.stdout_text.find("num_regions = 2") != std::string::npos);
  RunResult six = run_cli(
      "train --data d48 --config t48.cfg --epochs 1 --seed 5 --regions 6 --out r6.ckpt", dir.path);
  CHECK(six.exit_code == 0);
}

TEST_CASE("eval prints one row per checkpoint plus the ensemble row") {
  TempDir dir;
  REQUIRE(run_cli("synth --out d --n 12 --side 16 --modality cip --seed 4", dir.path).exit_code == 0);
  write_tiny_config(dir.path / "tiny.cfg");
  REQUIRE(run_cli("train --data d --config tiny.cfg --epochs 1 --seed 5 --out a.ckpt", dir.path)
              .exit_code == 0);
  REQUIRE(run_cli("train --data d --config tiny.cfg --epochs 1 --seed 6 --out b.ckpt", dir.path)
              .exit_code == 0);
  REQUIRE(run_cli(
              "train --data d --config tiny.cfg --epochs 1 --seed 7 --aggregator pvt "
              "--out c.ckpt",
              dir.path)
              .exit_code == 0);

  RunResult one = run_cli("eval --ckpt a.ckpt --data d", dir.path);
  CHECK(one.exit_code == 0);
  CHECK(one.stdout_text.find("a.ckpt") != std::string::npos);
  CHECK(one.stdout_text.find("ensemble") == std::string::npos);

  RunResult three = run_cli("eval --ckpt a.ckpt b.ckpt c.ckpt --data d", dir.path);
  CHECK(three.exit_code == 0);
  CHECK(three.stdout_text.find("ensemble(mean)") != std::string::npos);
}

TEST_CASE("gradcheck passes and the corrupt fixture is caught") {
  TempDir dir;
  RunResult ok = run_cli("gradcheck --size 16 --seed 1", dir.path);
  CHECK(ok.exit_code == 0);
  CHECK(ok.stdout_text.find("PASS") != std::string::npos);
  CHECK(ok.stdout_text.find("FAIL") == std::string::npos);

  RunResult bad = run_cli("gradcheck --corrupt --seed 1", dir.path);
  CHECK(bad.exit_code == 0);  // catching the corruption is the success case
  CHECK(bad.stdout_text.find("CAUGHT") != std::string::npos);
}

TEST_CASE("gradcheck report lists every parameter block exactly once") {
  TempDir dir;
  RunResult r = run_cli("gradcheck --size 16 --seed 1", dir.path);
  REQUIRE(r.exit_code == 0);
  std::vector<std::string> names;
  std::istringstream in(r.stdout_text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("param ", 0) == 0) {
      names.push_back(line.substr(6, line.find(" max_rel_err") - 6));
    }
  }
  CHECK(names.size() == 400);
  std::sort(names.begin(), names.end());
  CHECK(std::adjacent_find(names.begin(), names.end()) == names.end());
}

TEST_CASE("mixdemo report rows satisfy the relabeling identity") {
  TempDir dir;
  REQUIRE(run_cli("synth --out d --n 10 --side 16 --modality cip --seed 9", dir.path).exit_code == 0);
  write_tiny_config(dir.path / "tiny.cfg");
  REQUIRE(run_cli("train --data d --config tiny.cfg --epochs 1 --seed 5 --out m.ckpt", dir.path)
              .exit_code == 0);
  RunResult r = run_cli("mixdemo --data d --ckpt m.ckpt --pairs 6 --seed 11 --out mix", dir.path);
  CHECK(r.exit_code == 0);

  std::ifstream report(dir.path / "mix" / "report.csv");
  std::string line;
  std::getline(report, line);
  CHECK(line == "idA,idB,yA,yB,lambda,ybar");
  int rows = 0;
  while (std::getline(report, line)) {
    std::vector<std::string> cells;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      std::size_t comma = line.find(',', pos);
      if (comma == std::string::npos) comma = line.size();
      cells.push_back(line.substr(pos, comma - pos));
      pos = comma + 1;
    }
    REQUIRE(cells.size() == 6);
    const double ya = std::stod(cells[2]), yb = std::stod(cells[3]);
    const double lambda = std::stod(cells[4]), ybar = std::stod(cells[5]);
    CHECK(lambda >= 0.0);
    CHECK(lambda <= 1.0);
    CHECK(std::abs(ybar - (lambda * yb + (1 - lambda) * ya)) <= 1e-12);
    ++rows;
    CHECK(fs::exists(dir.path / "mix" / ("pair" + std::to_string(rows - 1) + "_mixed.pgm")));
  }
  CHECK(rows == 6);

  // seeded rerun reproduces the report byte for byte
  RunResult again =
      run_cli("mixdemo --data d --ckpt m.ckpt --pairs 6 --seed 11 --out mix2", dir.path);
  CHECK(again.exit_code == 0);
  CHECK(read_file(dir.path / "mix" / "report.csv") ==
        read_file(dir.path / "mix2" / "report.csv"));
}

TEST_CASE("usage and config errors exit with code 2") {
  TempDir dir;
  CHECK(run_cli("train", dir.path).exit_code == 2);              // missing required --data
  CHECK(run_cli("bogus-subcommand", dir.path).exit_code == 2);
  CHECK(run_cli("eval --ckpt missing.ckpt --data nowhere", dir.path).exit_code == 2);

  // malformed config file
  std::ofstream bad(dir.path / "bad.cfg");
  bad << "not a key value line\n";
  bad.close();
  REQUIRE(run_cli("synth --out d --n 4 --side 16 --seed 0", dir.path).exit_code == 0);
  CHECK(run_cli("train --data d --config bad.cfg --out x.ckpt", dir.path).exit_code == 2);

  // unknown config key
  std::ofstream unk(dir.path / "unk.cfg");
  unk << "definitely_unknown = 1\n";
  unk.close();
  CHECK(run_cli("train --data d --config unk.cfg --out x.ckpt", dir.path).exit_code == 2);
}
