// minv: synth / pretrain / invert / generate / evaluate.
//
// Every subcommand takes the same key registry: defaults, then an optional
// --config key=value file, then --key=value flags (flags win).

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "minv/minv.hpp"
#include "minv/run_config.hpp"

namespace fs = std::filesystem;
using namespace minv;

namespace {

enum Exit : int { kOk = 0, kFailure = 1, kConfig = 2, kFormat = 3, kNumeric = 4 };

void log(const std::string& msg) { std::cerr << "[minv] " << msg << '\n'; }

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string loss_log(const std::vector<double>& losses) {
  std::string out = "# step loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) out += std::to_string(i) + ' ' + fmt(losses[i]) + '\n';
  return out;
}

ProgressFn progress(const std::string& what) {
  return [what](std::size_t step, double loss) { log(what + " step " + std::to_string(step) + " loss " + fmt(loss)); };
}

DenoiserParams load_frozen(const RunConfig& cfg) {
  auto p = load_params(cfg.path("params", "denoiser.mden"));
  if (!p.frozen) throw FormatError("checkpoint " + cfg.path("params", "denoiser.mden") + " is not frozen");
  return p;
}

void cmd_synth(const RunConfig& cfg) {
  const auto spec = cfg.spec();
  const fs::path out = cfg.out_dir();
  std::string index = "# path prompt script\n";
  const auto corpus = default_corpus(cfg.size("synth.appearances"), spec.frames, spec.height, spec.width);
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    const auto& e = corpus[k];
    GroundTruth gt;
    const Tensor video = render(e.script, e.appearance_seed, &gt);
    const std::string stem = "corpus/" + std::to_string(k) + "_" + e.script.name + "_a" + std::to_string(e.prompt);
    save_video(video, out / (stem + ".mvid"));
    io::write_text_atomic(out / (stem + ".gt.txt"), format_ground_truth(gt));
    index += stem + ".mvid " + std::to_string(e.prompt) + ' ' + e.script.name + '\n';
  }
  io::write_text_atomic(cfg.path("corpus", "corpus.txt"), index);

  const auto script = pan_right_script(spec.frames, spec.height, spec.width, cfg.real("synth.reference_speed"));
  GroundTruth gt;
  const Tensor ref = render(script, cfg.u64("synth.reference_seed"), &gt);
  const fs::path video = cfg.path("video", "reference.mvid");
  save_video(ref, video);
  fs::path gt_path = video;
  gt_path.replace_extension(".gt.txt");
  io::write_text_atomic(gt_path, format_ground_truth(gt));
  if (cfg.flag("synth.ppm")) export_ppm(ref, out / "ppm" / "reference");
  log("wrote " + std::to_string(corpus.size()) + " corpus clips and reference " + video.string());
}

void cmd_pretrain(const RunConfig& cfg) {
  const auto spec = cfg.spec();
  const auto pc = cfg.pretraining();
  const auto schedule = cfg.schedule();
  const fs::path index = cfg.path("corpus", "corpus.txt");
  std::ifstream in(index);
  if (!in) throw FormatError("cannot open corpus index " + index.string());
  std::vector<TrainingClip> clips;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string rel;
    std::size_t prompt = 0;
    if (!(ls >> rel >> prompt)) throw FormatError(index.string() + ":" + std::to_string(no) + ": expected 'path prompt'");
    if (prompt >= spec.vocab)
      throw ConfigError(index.string() + ":" + std::to_string(no) + ": prompt id exceeds spec.vocab");
    clips.push_back({load_video(index.parent_path() / rel), prompt});
  }
  for (const auto& c : clips) {
    try {
      detail::check_video(spec, c.video);
    } catch (const ShapeError& e) {
      throw FormatError(std::string("corpus clip does not match the configured spec: ") + e.what());
    }
  }
  log("pretraining on " + std::to_string(clips.size()) + " clips for " + std::to_string(pc.steps) + " steps");
  const auto res = pretrain(clips, spec, pc, schedule, progress("pretrain"));
  save_params(res.params, cfg.path("params", "denoiser.mden"));
  io::write_text_atomic(fs::path(cfg.out_dir()) / "pretrain_loss.txt", loss_log(res.losses));
}

void cmd_invert(const RunConfig& cfg) {
  const auto ic = cfg.inversion();
  const auto schedule = cfg.schedule();
  const auto params = load_frozen(cfg);
  const Tensor video = load_video(cfg.path("video", "reference.mvid"));
  const std::size_t cond = cfg.size("invert.cond");
  if (cond >= params.spec.vocab) throw ConfigError("invert.cond exceeds the checkpoint's vocabulary");
  try {
    detail::check_video(params.spec, video);
  } catch (const ShapeError& e) {
    throw FormatError(std::string("reference video does not match the checkpoint: ") + e.what());
  }
  const auto res = invert(video, params, cond, ic, schedule, progress("invert"));
  save_embeddings(res.embeddings, cfg.path("embeddings", "embeddings.memb"));
  io::write_text_atomic(fs::path(cfg.out_dir()) / "invert_loss.txt", loss_log(res.losses));
}

void cmd_generate(const RunConfig& cfg) {
  const auto schedule = cfg.schedule();
  SampleOptions so;
  so.steps = cfg.size("generate.steps");
  so.seed = cfg.u64("generate.seed");
  so.cond = cfg.size("generate.cond");
  if (so.steps == 0 || so.steps > schedule.steps()) throw ConfigError("generate.steps must lie in [1, schedule.steps]");
  const bool use = cfg.flag("generate.use_embeddings");
  std::optional<InferenceStrategy> override;
  if (const auto& s = cfg.str("generate.strategy"); !s.empty()) {
    override = parse_inference_strategy(s);
    if (!override) throw ConfigError("generate.strategy: unknown strategy '" + s + "'");
  }
  const auto params = load_frozen(cfg);
  if (so.cond >= params.spec.vocab) throw ConfigError("generate.cond exceeds the checkpoint's vocabulary");
  Tensor x;
  if (use) {
    auto m = load_embeddings(cfg.path("embeddings", "embeddings.memb"));
    try {
      m.check_compatible(params.spec);
    } catch (const ShapeError& e) {
      throw FormatError(std::string("embeddings do not match the checkpoint: ") + e.what());
    }
    if (override) m.config.strategy = *override;
    log("sampling with embeddings, strategy " + std::string(to_string(m.config.strategy)));
    x = sample(params, m, schedule, so);
  } else {
    log("sampling without embeddings");
    x = sample(params, schedule, so);
  }
  const Tensor video = to_pixel_space(x);
  const fs::path out = cfg.path("output", "generated.mvid");
  save_video(video, out);
  if (cfg.flag("generate.ppm")) export_ppm(video, fs::path(cfg.out_dir()) / "ppm" / "generated");
  log("wrote " + out.string());
}

void cmd_evaluate(const RunConfig& cfg) {
  const std::string ref_path = cfg.str("evaluate.reference").empty() ? cfg.path("video", "reference.mvid")
                                                                     : cfg.str("evaluate.reference");
  const std::string gen_path = cfg.str("evaluate.generated").empty() ? cfg.path("output", "generated.mvid")
                                                                     : cfg.str("evaluate.generated");
  const Tensor ref = load_video(ref_path);
  const Tensor gen = load_video(gen_path);
  if (ref.shape() != gen.shape())
    throw FormatError("videos differ in shape: " + to_string(ref.shape()) + " vs " + to_string(gen.shape()));
  const auto tr = track(ref), tg = track(gen);
  const Vec2 md = mean_displacement(tg);
  std::string report = "# metric value inputs\n";
  auto line = [&](const std::string& name, const std::string& value, const std::string& inputs) {
    report += name + ' ' + value + ' ' + inputs + '\n';
    log(name + " = " + value);
  };
  const std::string both = ref_path + ',' + gen_path;
  line("motion_fidelity", fmt(motion_fidelity(tr, tg)), both);
  line("temporal_consistency", fmt(temporal_consistency(gen)), gen_path);
  line("frechet_distance", fmt(frechet_distance(frame_features(ref), frame_features(gen))), both);
  line("mean_displacement", fmt(md.x) + ',' + fmt(md.y), gen_path);
  const fs::path out = cfg.path("report", "report.txt");
  io::write_text_atomic(out, report);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Motion embedding inversion for a toy video diffusion model.\n"
               "Every key can be set in a key=value file (--config) or as --key=value; flags win.\n"
               "Default output directory: $" + std::string(kOutDirEnv) + ", else ./minv_out."};
  app.require_subcommand(1);
  std::string config_file;
  std::map<std::string, std::string> flags;
  app.add_option("--config", config_file, "key=value config file");
  for (const auto& k : config_keys()) {
    const std::string def = k.default_value.empty() ? "\"\"" : k.default_value;
    app.add_option_function<std::string>(
        "--" + k.name, [&flags, name = k.name](const std::string& v) { flags[name] = v; },
        k.help + " [default: " + def + "]");
  }
  struct Command {
    const char* name;
    const char* help;
    void (*run)(const RunConfig&);
  };
  const Command commands[] = {
      {"synth", "render the training corpus and the held-out reference video", cmd_synth},
      {"pretrain", "pretrain the denoiser on the corpus and freeze it", cmd_pretrain},
      {"invert", "learn motion embeddings for the reference video", cmd_invert},
      {"generate", "sample a video, optionally injecting motion embeddings", cmd_generate},
      {"evaluate", "score a generated video against the reference", cmd_evaluate},
  };
  for (const auto& c : commands) app.add_subcommand(c.name, c.help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  const Command* chosen = nullptr;
  for (const auto& c : commands)
    if (app.got_subcommand(c.name)) chosen = &c;

  RunConfig cfg;
  try {
    if (!config_file.empty()) cfg.merge_text(read_text(config_file), config_file);
    for (const auto& [k, v] : flags) cfg.set(k, v);
    std::istringstream dump(cfg.dump());
    log(std::string("command ") + chosen->name + ", resolved config:");
    for (std::string l; std::getline(dump, l);) log("  " + l);
    io::write_text_atomic(fs::path(cfg.out_dir()) / (std::string(chosen->name) + ".config.txt"), cfg.dump());
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kFormat;
  }

  const auto t0 = std::chrono::steady_clock::now();
  try {
    chosen->run(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kFormat;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kFormat;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  log(std::string(chosen->name) + " done in " +
      fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + " s");
  return kOk;
}
