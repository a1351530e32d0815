#include "quadgate/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace qg {

namespace {

using nlohmann::json;

// Target blob coverage, shaped per modality to mirror the clinical score
// histograms: cip mostly near zero, ge mostly above mid-range, lo mid-heavy.
double sample_coverage(Modality m, Rng& rng) {
  double u = rng.uniform();
  switch (m) {
    case Modality::cip:
      return 0.6 * u * u * u;
    case Modality::ge:
      return 0.8 * std::cbrt(u);
    case Modality::lo:
      return 0.9 * 0.5 * (rng.uniform() + u);
  }
  return 0.0;
}

}  // namespace

std::vector<Sample> generate_synthetic(const SyntheticSpec& spec) {
  if (spec.count < 0 || spec.side < 8) {
    throw config_error("synthetic spec needs a nonnegative count and side >= 8");
  }
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(spec.count));
  const int s = spec.side;
  const double total = static_cast<double>(s) * s;

  for (int idx = 0; idx < spec.count; ++idx) {
    Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(idx)));
    Tensor img = Tensor::full({1, s, s}, 0.1);
    std::vector<char> blob(static_cast<std::size_t>(s) * s, 0);

    const double target = sample_coverage(spec.modality, rng);
    long painted = 0;
    // paint ellipses until the requested coverage is reached
    while (painted < static_cast<long>(target * total)) {
      const double cy = rng.uniform(0, s);
      const double cx = rng.uniform(0, s);
      const double ry = rng.uniform(2.0, s / 6.0);
      const double rx = rng.uniform(2.0, s / 6.0);
      const int y0 = std::max(0, static_cast<int>(cy - ry));
      const int y1 = std::min(s - 1, static_cast<int>(cy + ry));
      const int x0 = std::max(0, static_cast<int>(cx - rx));
      const int x1 = std::min(s - 1, static_cast<int>(cx + rx));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
          if (dy * dy + dx * dx > 1.0) continue;
          auto& cell = blob[static_cast<std::size_t>(y) * s + x];
          if (!cell) {
            cell = 1;
            ++painted;
            img.values()[static_cast<std::size_t>(y) * s + x] = 0.9;
          }
        }
      }
    }

    // score from the generator's own pixel count, before any noise
    const double score = static_cast<double>(painted) / total * score_max(spec.modality);
    if (spec.noise > 0.0) {
      for (double& v : img.values()) {
        v = std::clamp(v + rng.uniform(-spec.noise, spec.noise), 0.0, 1.0);
      }
    }
    char name[16];
    std::snprintf(name, sizeof(name), "img%05d", idx);
    out.push_back({img, score, name});
  }
  return out;
}

void write_pgm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 1) {
    throw contract_error("write_pgm: need a single-channel [1,H,W] image, got " +
                         shape_str(image.shape()));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write image '" + path + "'");
  const int h = image.dim(1), w = image.dim(2);
  out << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = std::clamp(image.values()[i], 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw io_error("short write to '" + path + "'");
}

namespace {

// Reads one whitespace-delimited token, skipping '#' comments.
std::string next_pnm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {}
      continue;
    }
    if (std::isspace(c)) continue;
    break;
  }
  if (c == EOF) return tok;
  tok.push_back(static_cast<char>(c));
  while ((c = in.get()) != EOF && !std::isspace(c) && c != '#') {
    tok.push_back(static_cast<char>(c));
  }
  if (c == '#') in.unget();
  return tok;
}

}  // namespace

Tensor read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open image '" + path + "'");
  std::string magic = next_pnm_token(in);
  if (magic != "P5") {
    throw io_error("'" + path + "' is not a binary graymap (magic '" + magic + "')");
  }
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_pnm_token(in));
    h = std::stoi(next_pnm_token(in));
    maxval = std::stoi(next_pnm_token(in));
  } catch (const std::exception&) {
    throw io_error("'" + path + "': malformed graymap header");
  }
  if (w <= 0 || h <= 0) throw io_error("'" + path + "': bad dimensions");
  if (maxval <= 0 || maxval > 255) {
    throw io_error("'" + path + "': unsupported maxval " + std::to_string(maxval));
  }
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h) * w);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw io_error("'" + path + "': truncated pixel data");
  }
  Tensor img = Tensor::zeros({1, h, w});
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    img.values()[i] = static_cast<double>(bytes[i]) / maxval;
  }
  return img;
}

Tensor bilinear_resize(const Tensor& image, int out_h, int out_w) {
  if (image.rank() != 3) {
    throw dim_error("bilinear_resize: need [C,H,W], got " + shape_str(image.shape()));
  }
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (out_h == h && out_w == w) return Tensor::from(image.shape(), image.values());
  Tensor out = Tensor::zeros({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch) {
    const double* src = image.data() + static_cast<std::size_t>(ch) * h * w;
    double* dst = out.data() + static_cast<std::size_t>(ch) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const double sy = (y + 0.5) * h / out_h - 0.5;
      int y0 = static_cast<int>(std::floor(sy));
      const double fy = sy - y0;
      int y1 = std::clamp(y0 + 1, 0, h - 1);
      y0 = std::clamp(y0, 0, h - 1);
      for (int x = 0; x < out_w; ++x) {
        const double sx = (x + 0.5) * w / out_w - 0.5;
        int x0 = static_cast<int>(std::floor(sx));
        const double fx = sx - x0;
        int x1 = std::clamp(x0 + 1, 0, w - 1);
        x0 = std::clamp(x0, 0, w - 1);
        const double top = src[y0 * w + x0] * (1 - fx) + src[y0 * w + x1] * fx;
        const double bot = src[y1 * w + x0] * (1 - fx) + src[y1 * w + x1] * fx;
        dst[y * out_w + x] = top * (1 - fy) + bot * fy;
      }
    }
  }
  return out;
}

void write_scores_csv(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot write score file '" + path + "'");
  out << "id,score\n";
  char buf[40];
  for (const Sample& s : samples) {
    std::snprintf(buf, sizeof(buf), "%.17g", s.score);
    out << s.id << ',' << buf << '\n';
  }
}

std::vector<Sample> load_dataset(const std::string& image_dir, const std::string& score_file,
                                 int target_size, int channels, Modality modality) {
  std::ifstream in(score_file);
  if (!in) throw io_error("cannot open score file '" + score_file + "'");
  std::string line;
  if (!std::getline(in, line)) throw io_error("'" + score_file + "': empty score file");

  struct Row {
    std::string id;
    double score;
  };
  std::vector<Row> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::size_t comma = line.find(',');
    if (comma == std::string::npos) {
      throw io_error(score_file + ":" + std::to_string(line_no) + ": expected `id,score`");
    }
    Row row;
    row.id = line.substr(0, comma);
    try {
      row.score = std::stod(line.substr(comma + 1));
    } catch (const std::exception&) {
      throw io_error(score_file + ":" + std::to_string(line_no) + ": bad score value");
    }
    if (!score_in_range(modality, row.score)) {
      throw io_error(score_file + ":" + std::to_string(line_no) + ": score " +
                     std::to_string(row.score) + " outside the " + to_string(modality) +
                     " range [0," + std::to_string(score_max(modality)) + "]");
    }
    rows.push_back(std::move(row));
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.id < b.id; });

  std::vector<std::string> missing;
  std::vector<Sample> samples;
  samples.reserve(rows.size());
  for (const Row& row : rows) {
    const std::filesystem::path img_path =
        std::filesystem::path(image_dir) / (row.id + ".pgm");
    if (!std::filesystem::exists(img_path)) {
      missing.push_back(row.id);
      continue;
    }
    Tensor gray = bilinear_resize(read_pgm(img_path.string()), target_size, target_size);
    Tensor img = gray;
    if (channels > 1) {
      img = concat(std::vector<Tensor>(static_cast<std::size_t>(channels), gray), 0);
    }
    samples.push_back({img, row.score, row.id});
  }
  if (!missing.empty()) {
    std::string ids;
    for (const auto& id : missing) ids += (ids.empty() ? "" : ", ") + id;
    throw io_error("missing image files for ids: " + ids);
  }
  return samples;
}

namespace {

constexpr int kCheckpointVersion = 1;

json config_to_json(const ModelConfig& cfg) {
  json j;
  j["input_size"] = cfg.input_size;
  j["channels"] = cfg.channels;
  j["patch_size"] = cfg.patch_size;
  j["stage_channels"] = cfg.stage_channels;
  j["stage_heads"] = cfg.stage_heads;
  j["stage_depths"] = cfg.stage_depths;
  j["sra_ratios"] = cfg.sra_ratios;
  j["num_regions"] = cfg.num_regions;
  j["cag_intermediate"] = cfg.cag_intermediate;
  j["aggregator"] = {{"kind", to_string(cfg.aggregator.kind)},
                     {"dim", cfg.aggregator.dim},
                     {"depth", cfg.aggregator.depth},
                     {"heads", cfg.aggregator.heads}};
  j["head_hidden"] = cfg.head_hidden;
  j["encoder"] = to_string(cfg.encoder_kind);
  j["modality"] = to_string(cfg.modality);
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.input_size = j.at("input_size").get<int>();
  cfg.channels = j.at("channels").get<int>();
  cfg.patch_size = j.at("patch_size").get<int>();
  cfg.stage_channels = j.at("stage_channels").get<std::vector<int>>();
  cfg.stage_heads = j.at("stage_heads").get<std::vector<int>>();
  cfg.stage_depths = j.at("stage_depths").get<std::vector<int>>();
  cfg.sra_ratios = j.at("sra_ratios").get<std::vector<int>>();
  cfg.num_regions = j.at("num_regions").get<int>();
  cfg.cag_intermediate = j.at("cag_intermediate").get<int>();
  const json& a = j.at("aggregator");
  cfg.aggregator.kind = parse_aggregator(a.at("kind").get<std::string>());
  cfg.aggregator.dim = a.at("dim").get<int>();
  cfg.aggregator.depth = a.at("depth").get<int>();
  cfg.aggregator.heads = a.at("heads").get<int>();
  cfg.head_hidden = j.at("head_hidden").get<int>();
  cfg.encoder_kind = parse_encoder(j.at("encoder").get<std::string>());
  cfg.modality = parse_modality(j.at("modality").get<std::string>());
  return cfg;
}

void put_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64_le(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (in.gcount() != 8) throw io_error("checkpoint: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_f64_le(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64_le(out, bits);
}

double get_f64_le(std::istream& in) {
  std::uint64_t bits = get_u64_le(in);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  ParamList params = model.params();
  json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["config"] = config_to_json(model.config());
  manifest["seed"] = model.init_seed();
  json plist = json::array();
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    plist.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(p.tensor.size());
  }
  manifest["params"] = plist;
  manifest["total_values"] = offset;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write checkpoint '" + path + "'");
  const std::string text = manifest.dump();
  put_u64_le(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params) {
    for (double v : p.tensor.values()) put_f64_le(out, v);
  }
  if (!out) throw io_error("short write to checkpoint '" + path + "'");
}

std::unique_ptr<Model> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open checkpoint '" + path + "'");
  const std::uint64_t manifest_len = get_u64_le(in);
  std::string text(manifest_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(manifest_len));
  if (in.gcount() != static_cast<std::streamsize>(manifest_len)) {
    throw io_error("checkpoint: truncated manifest");
  }
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::parse_error& e) {
    throw io_error(std::string("checkpoint: bad manifest: ") + e.what());
  }
  const int version = manifest.at("format_version").get<int>();
  if (version != kCheckpointVersion) {
    throw io_error("checkpoint format version " + std::to_string(version) + ", expected " +
                   std::to_string(kCheckpointVersion));
  }
  ModelConfig cfg = config_from_json(manifest.at("config"));
  auto model = std::make_unique<Model>(cfg, manifest.value("seed", std::uint64_t{0}));
  ParamList params = model->params();

  std::size_t entry = 0;
  for (const auto& pj : manifest.at("params")) {
    if (entry >= params.size()) {
      throw io_error("checkpoint: more parameters than the model has");
    }
    NamedParam& p = params[entry];
    const std::string name = pj.at("name").get<std::string>();
    if (name != p.name) {
      throw io_error("checkpoint: parameter '" + name + "' does not match model parameter '" +
                     p.name + "'");
    }
    const std::vector<int> shape = pj.at("shape").get<std::vector<int>>();
    if (shape != p.tensor.shape()) {
      throw io_error("checkpoint: shape mismatch for '" + name + "': file " + shape_str(shape) +
                     " vs model " + shape_str(p.tensor.shape()));
    }
    for (double& v : p.tensor.values()) {
      v = get_f64_le(in);
      if (!in) throw io_error("checkpoint: truncated payload at '" + name + "'");
    }
    ++entry;
  }
  if (entry != params.size()) {
    throw io_error("checkpoint: fewer parameters than the model has");
  }
  return model;
}

}  // namespace qg
