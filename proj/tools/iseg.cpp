// iseg command-line tool: refine, synth, eval, seed, inspect, mkdump.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "iseg/iseg.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  int iters = 10;
  double lambda = 0.01;
  double gamma = 1.6;
  double tau = 0.5;
  std::string levels;
  std::string bg_mode = "threshold";
  std::uint64_t seed = 0;
  std::string out = ".";
};

iseg::RefineConfig refine_config(const Common& c) {
  iseg::RefineConfig cfg;
  cfg.iterations = c.iters;
  cfg.lambda = c.lambda;
  cfg.gamma = c.gamma;
  cfg.tau = c.tau;
  iseg::validate(cfg);
  return cfg;
}

json config_json(const iseg::RefineConfig& cfg) {
  return {{"iterations", cfg.iterations}, {"lambda", cfg.lambda},           {"gamma", cfg.gamma},
          {"tau", cfg.tau},               {"epsilon_log", cfg.epsilon_log}, {"normalize", "min_max"}};
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

int parse_int(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw iseg::ParameterError("bad " + what + " '" + s + "'");
  return v;
}

double parse_double(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw iseg::ParameterError("bad " + what + " '" + s + "'");
  return v;
}

// Comma-separated list held as one string. Config files deliver such values
// as arrays, so the pieces are joined back.
CLI::Option* add_list_option(CLI::App* app, const std::string& name, std::string& target, const std::string& help = "") {
  return app->add_option(name, target, help)
      ->expected(1, CLI::detail::expected_max_vector_size)
      ->allow_extra_args(false)
      ->delimiter(',')
      ->multi_option_policy(CLI::MultiOptionPolicy::Join);
}

// "16,32" or "16x16,32x32"; empty selects every level in the dump.
std::vector<iseg::Grid> parse_levels(const std::string& s) {
  std::vector<iseg::Grid> out;
  for (const auto& item : split(s, ',')) {
    const auto x = item.find('x');
    if (x == std::string::npos) {
      const int n = parse_int(item, "level");
      out.push_back({n, n});
    } else {
      out.push_back({parse_int(item.substr(0, x), "level"), parse_int(item.substr(x + 1), "level")});
    }
  }
  return out;
}

// "r,c;r,c;..."
std::vector<iseg::Pixel> parse_points(const std::string& s) {
  std::vector<iseg::Pixel> out;
  for (const auto& item : split(s, ';')) {
    const auto parts = split(item, ',');
    if (parts.size() != 2) throw iseg::ParameterError("point '" + item + "' is not r,c");
    out.push_back({parse_int(parts[0], "row"), parse_int(parts[1], "column")});
  }
  return out;
}

std::string safe_stem(const std::string& id) {
  std::string s = id.empty() ? "image" : id;
  for (char& ch : s)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.')) ch = '_';
  return s;
}

iseg::AttnDump load_dump(const std::string& path) {
  try {
    return iseg::decode_dump(iseg::read_file(path));
  } catch (const iseg::Error& e) {
    throw iseg::ValidationError(path + ": " + e.what());
  }
}

// Collects outputs of one command and writes the manifest last.
class Run {
 public:
  Run(std::string command, fs::path dir) : command_(std::move(command)), dir_(std::move(dir)) {
    fs::create_directories(dir_);
  }

  json parameters = json::object();
  json seeds = json::object();

  void input(const std::string& path) { inputs_.push_back({{"path", path}, {"sha256", iseg::sha256_file(path)}}); }

  void write(const std::string& name, const std::string& bytes) {
    const fs::path p = dir_ / name;
    {
      std::ofstream f(p, std::ios::binary | std::ios::trunc);
      if (!f) throw iseg::IoError("cannot open " + p.string() + " for writing");
      f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!f) throw iseg::IoError("failed writing " + p.string());
    }
    if (iseg::read_file(p.string()) != bytes) throw iseg::IoError("read-back mismatch for " + p.string());
    record(name, bytes);
  }

  void write_mask(const std::string& name, const iseg::SegMask& mask) {
    const fs::path p = dir_ / name;
    iseg::write_mask_png(p.string(), mask);
    if (iseg::read_mask_png(p.string()).labels != mask.labels) throw iseg::IoError("read-back mismatch for " + p.string());
    record(name, iseg::read_file(p.string()));
  }

  void write_image(const std::string& name, const iseg::GrayImage& img) {
    const fs::path p = dir_ / name;
    iseg::write_png(p.string(), img);
    if (iseg::read_png(p.string()).pixels != img.pixels) throw iseg::IoError("read-back mismatch for " + p.string());
    record(name, iseg::read_file(p.string()));
  }

  void finish() {
    json m = {{"tool", "iseg"},         {"version", iseg::kVersion}, {"command", command_}, {"parameters", parameters},
              {"seeds", seeds},         {"inputs", inputs_},         {"outputs", outputs_}};
    write_raw("manifest.json", m.dump(2) + "\n");
  }

  const fs::path& dir() const { return dir_; }

 private:
  void record(const std::string& name, const std::string& bytes) {
    outputs_.push_back({{"file", name}, {"sha256", iseg::sha256_hex(bytes)}});
  }
  void write_raw(const std::string& name, const std::string& bytes) {
    const fs::path p = dir_ / name;
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.close();
    if (!f || iseg::read_file(p.string()) != bytes) throw iseg::IoError("failed writing " + p.string());
  }

  std::string command_;
  fs::path dir_;
  json inputs_ = json::array();
  json outputs_ = json::array();
};

std::string maps_bytes(const iseg::Matrix& maps) {
  std::string out;
  iseg::detail::put_tensor(out, maps);
  return out;
}

// --- commands ---------------------------------------------------------------

int cmd_refine(const Common& c, const std::vector<std::string>& dumps) {
  const auto cfg = refine_config(c);
  const auto mode = iseg::parse_background_mode(c.bg_mode);
  const auto levels = parse_levels(c.levels);
  Run run("refine", c.out);
  json levels_json = json::array();
  for (auto g : levels) levels_json.push_back(iseg::to_string(g));
  run.parameters = {{"refine", config_json(cfg)}, {"levels", levels_json}, {"bg_mode", iseg::to_string(mode)}};
  std::set<std::string> stems;
  for (const auto& path : dumps) {
    run.input(path);
    const auto dump = load_dump(path);
    const auto r = iseg::refine_dump(dump, cfg, mode, levels);
    const std::string stem = safe_stem(dump.image_id);
    if (!stems.insert(stem).second) throw iseg::ConfigError("two inputs share image id '" + dump.image_id + "'");

    std::vector<std::string> channels;
    for (const auto& cat : dump.token_meta.categories) channels.push_back(cat.name);
    if (r.refined.background_channel) channels.push_back("background");
    json palette = {{"image_id", dump.image_id},
                    {"labels", r.output.palette},
                    {"working_resolution", iseg::detail::grid_json(r.mask.grid)},
                    {"image_size", iseg::detail::grid_json(r.output.grid)},
                    {"maps", {{"file", stem + ".maps.f32"},
                              {"dtype", "f32le"},
                              {"shape", {r.refined.maps.rows(), r.refined.maps.cols()}},
                              {"channels", channels}}}};
    run.write_mask(stem + ".png", r.output);
    run.write(stem + ".palette.json", palette.dump(2) + "\n");
    run.write(stem + ".maps.f32", maps_bytes(r.refined.maps));
    spdlog::info("refined {} ({} categories, {} at {})", dump.image_id, dump.token_meta.categories.size(),
                 iseg::to_string(r.mask.grid), iseg::to_string(r.output.grid));
  }
  run.finish();
  return 0;
}

struct SynthArgs {
  int scenes = 100;
  int size = 64;
  int min_segments = 1;
  int max_segments = 3;
  double beta = 0.3;
  double jitter = 0.2;
  double locality = 1.0;
  double locality_weight = 1.0;
  std::string lambdas = "0,0.001,0.005,0.01,0.05,0.1";
  std::string iters_grid = "1,2,4,6,8,10,12";
};

int cmd_synth(const Common& c, const SynthArgs& s) {
  iseg::StudyOptions opt;
  opt.scenes = s.scenes;
  opt.seed = c.seed;
  opt.tau = c.tau;
  opt.scene.grid = {s.size, s.size};
  opt.scene.min_segments = s.min_segments;
  opt.scene.max_segments = s.max_segments;
  if (s.scenes < 1) throw iseg::ParameterError("scene count must be >= 1");
  if (s.size < 2) throw iseg::ParameterError("scene size must be >= 2");
  if (!(c.tau > 0.0 && c.tau < 1.0)) throw iseg::ParameterError("tau must lie in (0, 1)");
  iseg::NoiseSpec noise;
  noise.offdiag_leak = s.beta;
  noise.jitter = s.jitter;
  noise.locality = s.locality;
  noise.locality_weight = s.locality_weight;
  noise.seed = iseg::mix_seed(c.seed, 0x6e6f697365ULL);
  iseg::StudyGrid grid;
  grid.lambdas.clear();
  grid.iterations.clear();
  for (const auto& v : split(s.lambdas, ',')) grid.lambdas.push_back(parse_double(v, "lambda"));
  for (const auto& v : split(s.iters_grid, ',')) grid.iterations.push_back(parse_int(v, "iteration count"));
  iseg::validate(grid);
  iseg::validate(noise);

  Run run("synth", c.out);
  run.parameters = {{"scenes", s.scenes},
                    {"size", s.size},
                    {"min_segments", s.min_segments},
                    {"max_segments", s.max_segments},
                    {"tau", c.tau},
                    {"noise",
                     {{"offdiag_leak", s.beta}, {"jitter", s.jitter}, {"locality", s.locality},
                      {"locality_weight", s.locality_weight}}},
                    {"lambdas", grid.lambdas},
                    {"iterations", grid.iterations}};
  run.seeds = {{"seed", c.seed}, {"noise_seed", noise.seed}};

  const auto table = iseg::degradation_study(opt, noise, grid);
  std::ostringstream csv;
  iseg::write_csv(csv, table);
  run.write("study.csv", csv.str());
  run.write("summary.json", iseg::to_json(table).dump(2) + "\n");
  run.finish();

  std::printf("%-8s", "lambda");
  for (int n : grid.iterations) std::printf(" %8s", ("N=" + std::to_string(n)).c_str());
  std::printf("\n");
  for (double l : grid.lambdas) {
    std::printf("%-8g", l);
    for (int n : grid.iterations) std::printf(" %8.4f", table.mean(l, n));
    std::printf("\n");
  }
  return 0;
}

std::map<std::string, fs::path> list_pngs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw iseg::IoError(dir.string() + " is not a directory");
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out[e.path().filename().string()] = e.path();
  return out;
}

int cmd_eval(const Common& c, const std::string& pred_dir, const std::string& gt_dir) {
  const auto preds = list_pngs(pred_dir);
  const auto gts = list_pngs(gt_dir);
  std::vector<std::string> unmatched;
  for (const auto& [name, _] : preds)
    if (!gts.count(name)) unmatched.push_back(pred_dir + "/" + name);
  for (const auto& [name, _] : gts)
    if (!preds.count(name)) unmatched.push_back(gt_dir + "/" + name);
  if (!unmatched.empty()) {
    std::cerr << "iseg: unmatched files:\n";
    for (const auto& u : unmatched) std::cerr << "  " << u << "\n";
    return 1;
  }
  if (preds.empty()) throw iseg::ConfigError("no .png masks in " + pred_dir);

  Run run("eval", c.out);
  iseg::ConfusionMatrix global;
  json images = json::array();
  double sum = 0.0;
  for (const auto& [name, pred_path] : preds) {
    run.input(pred_path.string());
    run.input(gts.at(name).string());
    const auto pred = iseg::read_mask_png(pred_path.string());
    const auto gt = iseg::read_mask_png(gts.at(name).string());
    if (pred.grid != gt.grid)
      throw iseg::ShapeError(name + ": prediction " + iseg::to_string(pred.grid) + " vs ground truth " + iseg::to_string(gt.grid));
    iseg::ConfusionMatrix cm;
    cm.add(pred, gt);
    global.add(pred, gt);
    const auto r = iseg::report_from_confusion(cm);
    sum += r.miou;
    images.push_back({{"file", name}, {"miou", r.miou}, {"acc", r.acc}});
  }
  const auto g = iseg::report_from_confusion(global);
  json report = {{"images", images},
                 {"global", iseg::to_json(g)},
                 {"mean_image_miou", sum / static_cast<double>(preds.size())},
                 {"image_count", preds.size()}};
  run.write("report.json", report.dump(2) + "\n");
  run.finish();
  std::printf("images %zu  mIoU %.4f  ACC %.4f\n", preds.size(), g.miou, g.acc);
  return 0;
}

int cmd_seed(const Common& c, const std::string& dump_path, const std::string& kind_s, const std::string& points) {
  const auto cfg = refine_config(c);
  const auto kind = iseg::parse_interaction_kind(kind_s);
  const auto geometry = parse_points(points);
  Run run("seed", c.out);
  run.input(dump_path);
  json pts = json::array();
  for (const auto& p : geometry) pts.push_back({p.row, p.col});
  run.parameters = {{"refine", config_json(cfg)}, {"kind", kind_s}, {"points", pts}};
  const auto dump = load_dump(dump_path);
  const auto r = iseg::refine_seed(dump.self_attention, kind, geometry, cfg);
  const std::string stem = safe_stem(dump.image_id);
  run.write_mask(stem + ".seed.png", iseg::resize_nearest(r.mask, dump.image_size));
  run.write(stem + ".seed.f32", maps_bytes(r.refined.maps));
  run.finish();
  return 0;
}

int cmd_inspect(const Common& c, const std::string& dump_path, const std::string& pixel, int n) {
  const auto pts = parse_points(pixel);
  if (pts.size() != 1) throw iseg::ParameterError("--pixel takes exactly one r,c");
  Run run("inspect", c.out);
  run.input(dump_path);
  run.parameters = {{"pixel", {pts[0].row, pts[0].col}}, {"n", n}, {"lambda", c.lambda}};
  const auto dump = load_dump(dump_path);
  const auto img = iseg::render_refined_affinity(dump.self_attention, pts[0], n, c.lambda);
  const std::string name = safe_stem(dump.image_id) + ".affinity." + std::to_string(pts[0].row) + "_" +
                           std::to_string(pts[0].col) + ".n" + std::to_string(n) + ".png";
  run.write_image(name, img);
  run.finish();
  return 0;
}

struct MkdumpArgs {
  int count = 1;
  int size = 32;
  int max_segments = 3;
  double beta = 0.3;
  double jitter = 0.2;
  double locality = 1.0;
  std::string pathway = "offline";
};

int cmd_mkdump(const Common& c, const MkdumpArgs& a) {
  if (a.count < 1) throw iseg::ParameterError("count must be >= 1");
  if (a.size < 4 || a.size % 2 != 0) throw iseg::ParameterError("size must be even and >= 4");
  Run run("mkdump", c.out);
  fs::create_directories(run.dir() / "gt");
  run.parameters = {{"count", a.count},   {"size", a.size},         {"max_segments", a.max_segments},
                    {"beta", a.beta},     {"jitter", a.jitter},     {"locality", a.locality},
                    {"pathway", a.pathway}};
  run.seeds = {{"seed", c.seed}};
  iseg::SceneOptions so;
  so.grid = {a.size, a.size};
  so.max_segments = a.max_segments;
  iseg::SyntheticDumpOptions opt;
  opt.pathway = iseg::parse_pathway(a.pathway);
  for (int i = 0; i < a.count; ++i) {
    const auto scene = iseg::generate_scene(so, iseg::mix_seed(c.seed, static_cast<std::uint64_t>(i)));
    iseg::NoiseSpec noise;
    noise.offdiag_leak = a.beta;
    noise.jitter = a.jitter;
    noise.locality = a.locality;
    noise.seed = iseg::mix_seed(scene.seed, 1);
    opt.seed = iseg::mix_seed(scene.seed, 2);
    char id[32];
    std::snprintf(id, sizeof id, "scene%03d", i);
    const auto dump = iseg::make_synthetic_dump(scene, noise, opt, id);
    run.write(std::string(id) + ".dump", iseg::encode_dump(dump));
    iseg::SegMask gt = iseg::resize_nearest(scene.mask, dump.image_size);
    run.write_mask("gt/" + std::string(id) + ".png", gt);
  }
  run.finish();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  iseg::log::init_from_env();
  CLI::App app{"Training-free segmentation from diffusion attention maps"};
  app.set_version_flag("--version", std::string(iseg::kVersion));
  app.set_config("--config", "", "key = value configuration file (flags override it)");
  app.require_subcommand(1);

  Common c;
  app.add_option("--iters", c.iters, "refinement iterations N")->capture_default_str();
  app.add_option("--lambda", c.lambda, "entropy-reduction step")->capture_default_str();
  app.add_option("--gamma", c.gamma, "category token weight")->capture_default_str();
  app.add_option("--tau", c.tau, "binarization threshold")->capture_default_str();
  add_list_option(&app, "--levels", c.levels, "cross-attention levels, e.g. 16,32 (default: all)");
  app.add_option("--bg-mode", c.bg_mode, "threshold | bg_channel")->capture_default_str();
  app.add_option("--seed", c.seed, "RNG seed")->capture_default_str();
  app.add_option("--out", c.out, "output directory")->capture_default_str();

  std::vector<std::string> dumps;
  auto* refine = app.add_subcommand("refine", "refine one or more attention dumps into masks");
  refine->add_option("dumps", dumps, "dump files")->required()->check(CLI::ExistingFile);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "degradation study on synthetic scenes");
  synth->add_option("--scenes", sa.scenes)->capture_default_str();
  synth->add_option("--size", sa.size, "scene side length")->capture_default_str();
  synth->add_option("--min-segments", sa.min_segments)->capture_default_str();
  synth->add_option("--max-segments", sa.max_segments)->capture_default_str();
  synth->add_option("--beta", sa.beta, "off-segment leak of the noisy self-attention")->capture_default_str();
  synth->add_option("--jitter", sa.jitter)->capture_default_str();
  synth->add_option("--locality", sa.locality, "local peak width in cells (0 = flat blocks)")->capture_default_str();
  synth->add_option("--locality-weight", sa.locality_weight)->capture_default_str();
  add_list_option(synth, "--lambdas", sa.lambdas)->capture_default_str();
  add_list_option(synth, "--iters-grid", sa.iters_grid)->capture_default_str();

  std::string pred_dir, gt_dir;
  auto* eval = app.add_subcommand("eval", "mIoU / ACC of predicted masks against ground truth");
  eval->add_option("pred_dir", pred_dir)->required();
  eval->add_option("gt_dir", gt_dir)->required();

  std::string seed_dump, kind = "point", points;
  auto* seed = app.add_subcommand("seed", "refine a point, line or box interaction");
  seed->add_option("dump", seed_dump)->required()->check(CLI::ExistingFile);
  seed->add_option("--kind", kind, "point | line | box")->capture_default_str();
  seed->add_option("--points", points, "r,c;r,c;... on the working grid")->required();

  std::string inspect_dump, pixel;
  int power = 1;
  auto* inspect = app.add_subcommand("inspect", "render a row of the refined self-attention power");
  inspect->add_option("dump", inspect_dump)->required()->check(CLI::ExistingFile);
  inspect->add_option("--pixel", pixel, "r,c on the working grid")->required();
  inspect->add_option("--n", power, "matrix power")->capture_default_str();

  MkdumpArgs ma;
  auto* mkdump = app.add_subcommand("mkdump", "write synthetic attention dumps and their ground-truth masks");
  mkdump->add_option("--count", ma.count)->capture_default_str();
  mkdump->add_option("--size", ma.size, "working resolution")->capture_default_str();
  mkdump->add_option("--max-segments", ma.max_segments)->capture_default_str();
  mkdump->add_option("--beta", ma.beta)->capture_default_str();
  mkdump->add_option("--jitter", ma.jitter)->capture_default_str();
  mkdump->add_option("--locality", ma.locality)->capture_default_str();
  mkdump->add_option("--pathway", ma.pathway, "offline | embedding")->capture_default_str();

  for (auto* sub : {refine, synth, eval, seed, inspect, mkdump}) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*refine) return cmd_refine(c, dumps);
    if (*synth) return cmd_synth(c, sa);
    if (*eval) return cmd_eval(c, pred_dir, gt_dir);
    if (*seed) return cmd_seed(c, seed_dump, kind, points);
    if (*inspect) return cmd_inspect(c, inspect_dump, pixel, power);
    if (*mkdump) return cmd_mkdump(c, ma);
  } catch (const iseg::Error& e) {
    std::cerr << "iseg: error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "iseg: error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
