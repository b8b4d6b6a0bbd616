#include "learn/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "learn/caption2layout.hpp"
#include "learn/checkpoint.hpp"
#include "learn/config.hpp"
#include "learn/dataset.hpp"
#include "learn/diffusion.hpp"
#include "learn/error.hpp"
#include "learn/metrics.hpp"
#include "learn/prompt_modulation.hpp"
#include "learn/random.hpp"
#include "learn/traversal.hpp"

namespace learn {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string run_manifest;
};

void add_common(CLI::App* app, CommonOptions& c) {
  app->add_option("--config", c.config_path, "JSON config file (default: $LEARN_CONFIG)");
  app->add_option("--set", c.overrides, "Override a config key, key=value (repeatable)");
  app->add_option("--seed", c.seed, "Root seed");
  app->add_option("--run-manifest", c.run_manifest, "Where to write the run manifest");
}

RunConfig build_config(const CommonOptions& c) {
  RunConfig rc = RunConfig::defaults();
  std::string path = c.config_path;
  if (path.empty()) {
    if (const char* env = std::getenv("LEARN_CONFIG")) path = env;
  }
  if (!path.empty()) rc.merge_file(path);
  for (const auto& s : c.overrides) rc.set(s);
  if (c.seed) rc.set("seed", json(*c.seed), "--seed");
  rc.validate();
  return rc;
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
}

class RunRecorder {
 public:
  RunRecorder(std::string command, const RunConfig& rc)
      : command_(std::move(command)), rc_(rc), start_(std::chrono::steady_clock::now()) {}

  void output(const fs::path& p) { outputs_.push_back(p.string()); }
  json& extra() { return extra_; }

  void write(const fs::path& path) const {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    json j;
    j["command"] = command_;
    j["version"] = kVersion;
    j["config_hash"] = rc_.hash();
    j["seed"] = rc_.seed();
    j["wall_time_seconds"] = wall;
    j["config"] = rc_.values();
    j["outputs"] = outputs_;
    if (!extra_.is_null()) j["summary"] = extra_;
    write_json(path, j);
  }

 private:
  std::string command_;
  const RunConfig& rc_;
  std::chrono::steady_clock::time_point start_;
  std::vector<std::string> outputs_;
  json extra_;
};

fs::path manifest_for_file(const CommonOptions& c, const fs::path& out) {
  return c.run_manifest.empty() ? fs::path(out.string() + ".run.json") : fs::path(c.run_manifest);
}

fs::path manifest_for_dir(const CommonOptions& c, const fs::path& dir) {
  return c.run_manifest.empty() ? dir / "run_manifest.json" : fs::path(c.run_manifest);
}

EncoderHandle make_encoder(const EncoderConfig& c) { return EncoderHandle(c); }

const LayoutDecoderModel& need_decoder(const ModelBundle& b, const std::string& ckpt) {
  if (!b.decoder) throw Error(ErrorCode::InvalidConfig, "checkpoint " + ckpt + " has no layout decoder");
  return *b.decoder;
}

const GeneratorModel& need_generator(const ModelBundle& b, const std::string& ckpt) {
  if (!b.generator) throw Error(ErrorCode::InvalidConfig, "checkpoint " + ckpt + " has no generator");
  return *b.generator;
}

ModelBundle fresh_bundle(const RunConfig& rc) {
  ModelBundle b;
  b.encoder = encoder_config(rc);
  const EncoderHandle enc = make_encoder(b.encoder);
  b.decoder = std::make_shared<LayoutDecoderModel>(decoder_config(rc), enc.text_dim(), enc.image_dim(),
                                                   derive_seed(rc.seed(), "decoder-init"));
  b.generator = std::make_shared<GeneratorModel>(diffusion_config(rc), enc.text_dim(),
                                                 derive_seed(rc.seed(), "generator-init"));
  return b;
}

int sample_steps(const RunConfig& rc, std::optional<int> flag) { return flag ? *flag : rc.get<int>("diffusion.sample_steps"); }

Image render_layout(const Layout& layout, int size) {
  Image canvas(size, size, 1.0);
  std::map<std::string, std::array<int, 3>> colors;
  for (const auto& p : default_palette()) colors[p.label] = p.rgb;
  for (const auto& el : layout.elements) {
    const auto it = colors.find(el.label);
    const std::array<int, 3> rgb = it == colors.end() ? std::array<int, 3>{0, 0, 0} : it->second;
    const PixelRect r = box_to_pixels(el.box, size, size);
    if (r.width() <= 0 || r.height() <= 0) continue;
    auto paint = [&](int y, int x) {
      for (int c = 0; c < 3; ++c) canvas(y, x, c) = rgb[static_cast<std::size_t>(c)] / 255.0;
    };
    for (int x = r.x0; x < r.x1; ++x) {
      paint(r.y0, x);
      paint(r.y1 - 1, x);
    }
    for (int y = r.y0; y < r.y1; ++y) {
      paint(y, r.x0);
      paint(y, r.x1 - 1);
    }
  }
  return canvas;
}

std::vector<Embedding> parse_candidates(const json& j, const EncoderHandle& enc) {
  if (!j.is_array()) throw Error(ErrorCode::ParseError, "candidates must be a JSON array");
  std::vector<Embedding> out;
  for (const auto& c : j) {
    if (c.is_string()) {
      const auto text = c.get<std::string>();
      // An empty description still needs a direction; use a fixed marker.
      out.push_back(encode_text(enc, text.empty() ? "<empty>" : text));
    } else if (c.is_array()) {
      const auto v = c.get<std::vector<double>>();
      Embedding e = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
      if (e.size() != enc.text_dim()) throw Error(ErrorCode::DimensionMismatch, "candidate embedding has the wrong dimension");
      out.push_back(std::move(e));
    } else {
      throw Error(ErrorCode::ParseError, "candidates must be strings or numeric arrays");
    }
  }
  return out;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"learn: layout-guided instructional image generation"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  CommonOptions common;
  std::function<void()> action;

  // dataset synth
  auto* dataset = app.add_subcommand("dataset", "Dataset tools");
  dataset->require_subcommand(1);
  auto* synth = dataset->add_subcommand("synth", "Generate the synthetic shapes dataset");
  add_common(synth, common);
  int synth_n = 64, synth_size = 32, synth_concepts = 0, synth_min = 1, synth_max = 3;
  std::string synth_out;
  synth->add_option("--n", synth_n, "Number of records");
  synth->add_option("--size", synth_size, "Image side in pixels");
  synth->add_option("--concepts", synth_concepts, "Number of concept templates (0: free layouts)");
  synth->add_option("--min-shapes", synth_min, "Minimum shapes per image");
  synth->add_option("--max-shapes", synth_max, "Maximum shapes per image");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->callback([&] {
    action = [&] {
      const RunConfig rc = build_config(common);
      RunRecorder rec("dataset synth", rc);
      SyntheticSpec spec;
      spec.num_records = synth_n;
      spec.image_size = synth_size;
      spec.num_concepts = synth_concepts;
      spec.min_shapes = synth_min;
      spec.max_shapes = synth_max;
      const auto samples = generate_synthetic_dataset(spec, rc.seed());
      const fs::path manifest = write_dataset(synth_out, samples);
      rec.output(manifest);
      rec.extra() = {{"records", samples.size()}};
      rec.write(manifest_for_dir(common, synth_out));
      out << manifest.string() << "\n";
    };
  });

  // train-layout
  auto* train_layout = app.add_subcommand("train-layout", "Train the caption-to-layout decoder");
  add_common(train_layout, common);
  std::string tl_data, tl_out;
  std::optional<int> tl_steps;
  train_layout->add_option("--data", tl_data, "Manifest (JSONL)")->required();
  train_layout->add_option("--out", tl_out, "Output checkpoint")->required();
  train_layout->add_option("--steps", tl_steps, "Override train.layout_steps");
  train_layout->callback([&] {
    action = [&] {
      RunConfig rc = build_config(common);
      if (tl_steps) rc.set("train.layout_steps", json(*tl_steps), "--steps");
      RunRecorder rec("train-layout", rc);
      const auto samples = load_samples(tl_data);
      ModelBundle b;
      b.encoder = encoder_config(rc);
      const EncoderHandle enc = make_encoder(b.encoder);
      b.decoder = std::make_shared<LayoutDecoderModel>(decoder_config(rc), enc.text_dim(), enc.image_dim(),
                                                       derive_seed(rc.seed(), "decoder-init"));
      const auto history =
          train_layout_decoder(*b.decoder, samples, enc, layout_loss_weights(rc), layout_optimizer_config(rc));
      save_bundle(tl_out, b);
      rec.output(tl_out);
      if (!history.empty()) {
        rec.extra() = {{"steps", history.size()}, {"first_total", history.front().total}, {"final_total", history.back().total}};
      }
      rec.write(manifest_for_file(common, tl_out));
      out << tl_out << "\n";
    };
  });

  // train-diffusion
  auto* train_diff = app.add_subcommand("train-diffusion", "Train the layout-conditioned generator");
  add_common(train_diff, common);
  std::string td_data, td_out, td_ckpt;
  std::optional<int> td_steps;
  train_diff->add_option("--data", td_data, "Manifest (JSONL)")->required();
  train_diff->add_option("--out", td_out, "Output checkpoint")->required();
  train_diff->add_option("--ckpt", td_ckpt, "Checkpoint with a layout decoder to carry over");
  train_diff->add_option("--steps", td_steps, "Override train.diffusion_steps");
  train_diff->callback([&] {
    action = [&] {
      RunConfig rc = build_config(common);
      if (td_steps) rc.set("train.diffusion_steps", json(*td_steps), "--steps");
      RunRecorder rec("train-diffusion", rc);
      const auto samples = load_samples(td_data);
      ModelBundle b;
      if (!td_ckpt.empty()) {
        b = load_bundle(td_ckpt);
        b.generator.reset();
      } else {
        b.encoder = encoder_config(rc);
      }
      const EncoderHandle enc = make_encoder(b.encoder);
      b.generator = std::make_shared<GeneratorModel>(diffusion_config(rc), enc.text_dim(),
                                                     derive_seed(rc.seed(), "generator-init"));
      const auto history =
          train_diffusion(*b.generator, samples, enc, diffusion_train_config(rc), b.decoder ? b.decoder.get() : nullptr);
      save_bundle(td_out, b);
      rec.output(td_out);
      if (!history.empty()) {
        rec.extra() = {{"steps", history.size()},
                       {"first_noise_mse", history.front().noise_mse},
                       {"final_noise_mse", history.back().noise_mse}};
      }
      rec.write(manifest_for_file(common, td_out));
      out << td_out << "\n";
    };
  });

  // generate
  auto* gen = app.add_subcommand("generate", "Generate an image for a prompt");
  add_common(gen, common);
  std::string g_ckpt, g_prompt, g_out, g_layout_out;
  std::optional<int> g_steps;
  bool g_ddim = false;
  gen->add_option("--ckpt", g_ckpt, "Checkpoint with decoder and generator")->required();
  gen->add_option("--prompt", g_prompt, "Concept prompt")->required();
  gen->add_option("--steps", g_steps, "Sampling steps");
  gen->add_option("--out", g_out, "Output PNG")->required();
  gen->add_option("--layout-out", g_layout_out, "Also write the predicted layout JSON");
  gen->add_flag("--ddim", g_ddim, "Deterministic DDIM sampler");
  gen->callback([&] {
    action = [&] {
      const RunConfig rc = build_config(common);
      RunRecorder rec("generate", rc);
      const ModelBundle b = load_bundle(g_ckpt);
      const EncoderHandle enc = make_encoder(b.encoder);
      const Layout layout = predict_layout(need_decoder(b, g_ckpt), g_prompt, enc).layout;
      SamplerOptions opt;
      opt.ddim = g_ddim;
      const Image img = generate(need_generator(b, g_ckpt), layout, enc, rc.seed(), sample_steps(rc, g_steps), opt);
      write_png(img, g_out);
      rec.output(g_out);
      if (!g_layout_out.empty()) {
        write_json(g_layout_out, layout_to_json(layout));
        rec.output(g_layout_out);
      }
      rec.extra() = {{"layout", layout_to_json(layout)}};
      rec.write(manifest_for_file(common, g_out));
      out << g_out << "\n";
    };
  });

  // traverse
  auto* trav = app.add_subcommand("traverse", "Render a curriculum sequence for a concept");
  add_common(trav, common);
  std::string t_graph, t_concept, t_out, t_ckpt;
  std::optional<int> t_steps;
  trav->add_option("--graph", t_graph, "Concept graph JSON")->required();
  trav->add_option("--concept", t_concept, "Target concept id")->required();
  trav->add_option("--out-dir", t_out, "Output directory")->required();
  trav->add_option("--ckpt", t_ckpt, "Checkpoint (default: models initialised from the seed)");
  trav->add_option("--steps", t_steps, "Sampling steps per frame");
  trav->callback([&] {
    action = [&] {
      const RunConfig rc = build_config(common);
      RunRecorder rec("traverse", rc);
      const ConceptGraph g = load_concept_graph(t_graph);
      const ModelBundle b = t_ckpt.empty() ? fresh_bundle(rc) : load_bundle(t_ckpt);
      const std::string ck = t_ckpt.empty() ? "<fresh>" : t_ckpt;
      const EncoderHandle enc = make_encoder(b.encoder);
      const auto frames = learn_traverse(g, t_concept, need_decoder(b, ck), need_generator(b, ck), enc, rc.seed(),
                                         sample_steps(rc, t_steps));
      fs::create_directories(t_out);
      json plan;
      plan["target"] = t_concept;
      plan["ordered_concepts"] = json::array();
      plan["frames"] = json::array();
      for (std::size_t i = 0; i < frames.size(); ++i) {
        std::ostringstream name;
        name << "frame_" << std::setw(3) << std::setfill('0') << i << ".png";
        write_png(frames[i].image, fs::path(t_out) / name.str());
        rec.output(fs::path(t_out) / name.str());
        plan["ordered_concepts"].push_back(frames[i].concept_id);
        plan["frames"].push_back({{"index", i},
                                  {"concept", frames[i].concept_id},
                                  {"prompt", g.node(frames[i].concept_id).prompt},
                                  {"file", name.str()},
                                  {"seed", concept_seed(rc.seed(), frames[i].concept_id)},
                                  {"layout", layout_to_json(frames[i].layout)}});
      }
      write_json(fs::path(t_out) / "plan.json", plan);
      rec.output(fs::path(t_out) / "plan.json");
      rec.write(manifest_for_dir(common, t_out));
      out << (fs::path(t_out) / "plan.json").string() << "\n";
    };
  });

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Score generated images against a reference manifest");
  add_common(eval, common);
  std::string e_pred, e_ref, e_out, e_annotator = "oracle";
  eval->add_option("--pred-dir", e_pred, "Directory of <id>.png (and optional <id>.json layouts)")->required();
  eval->add_option("--ref", e_ref, "Reference manifest")->required();
  eval->add_option("--out", e_out, "Report JSON")->required();
  eval->add_option("--annotator", e_annotator, "Annotator used when no predicted layout file exists");
  eval->callback([&] {
    action = [&] {
      const RunConfig rc = build_config(common);
      RunRecorder rec("evaluate", rc);
      const EncoderHandle enc = make_encoder(encoder_config(rc));
      const auto refs = load_samples(e_ref);
      const auto registry = AnnotatorRegistry::with_builtins();
      MetricReport report;
      std::vector<Embedding> pred_feats, ref_feats;
      for (const auto& s : refs) {
        const fs::path img_path = fs::path(e_pred) / (s.record.id + ".png");
        if (!fs::exists(img_path)) throw Error(ErrorCode::MissingImage, "no prediction " + img_path.string());
        const Image pred = read_png(img_path);
        const fs::path layout_path = fs::path(e_pred) / (s.record.id + ".json");
        Layout predicted;
        if (fs::exists(layout_path)) {
          predicted = layout_from_json(read_json(layout_path));
        } else {
          AnnotatedImage tmp;
          tmp.regions = annotate_image(pred, registry, e_annotator);
          predicted = tmp.layout();
        }
        std::vector<RegionMask> masks;
        for (const auto& r : s.record.regions) {
          masks.push_back(RegionMask::from_box(r.box, s.image.height(), s.image.width(), r.label));
        }
        MetricItem item;
        item.id = s.record.id;
        item.crop_clip = crop_clip_score(pred, predicted, enc).score;
        item.sam_iou = masks.empty() ? 0.0 : sam_iou(predicted, masks);
        report.items.push_back(item);
        pred_feats.push_back(encode_image(enc, pred));
        ref_feats.push_back(encode_image(enc, s.image));
      }
      if (pred_feats.size() >= 2) report.fid = fid_score(stack_rows(pred_feats), stack_rows(ref_feats));
      report.finalize();
      write_json(e_out, report.to_json());
      rec.output(e_out);
      rec.write(manifest_for_file(common, e_out));
      out << e_out << "\n";
    };
  });

  // tune-background
  auto* tune = app.add_subcommand("tune-background", "Pick the clearest background pseudo-prompt");
  add_common(tune, common);
  std::string b_ckpt, b_candidates, b_out, b_prompt;
  int b_seeds = 3;
  std::optional<int> b_steps;
  tune->add_option("--ckpt", b_ckpt, "Checkpoint with a generator")->required();
  tune->add_option("--candidates", b_candidates, "JSON array of strings or embeddings")->required();
  tune->add_option("--seeds", b_seeds, "Images per candidate");
  tune->add_option("--out", b_out, "Result JSON")->required();
  tune->add_option("--prompt", b_prompt, "Prompt whose predicted layout conditions generation");
  tune->add_option("--steps", b_steps, "Sampling steps");
  tune->callback([&] {
    action = [&] {
      const RunConfig rc = build_config(common);
      RunRecorder rec("tune-background", rc);
      if (b_seeds < 1) throw Error(ErrorCode::InvalidConfig, "--seeds must be >= 1");
      const ModelBundle b = load_bundle(b_ckpt);
      const EncoderHandle enc = make_encoder(b.encoder);
      const auto candidates = parse_candidates(read_json(b_candidates), enc);
      Layout layout;
      if (!b_prompt.empty()) layout = predict_layout(need_decoder(b, b_ckpt), b_prompt, enc).layout;
      std::vector<std::uint64_t> seeds;
      for (int i = 0; i < b_seeds; ++i) seeds.push_back(derive_seed(rc.seed(), "background-" + std::to_string(i)));
      const auto sel = select_background_pseudo_prompt(candidates, need_generator(b, b_ckpt), layout, enc, seeds,
                                                       sample_steps(rc, b_steps));
      json result;
      result["best_index"] = sel.best_index;
      result["scores"] = sel.scores;
      result["best_embedding"] = std::vector<double>(sel.best.data(), sel.best.data() + sel.best.size());
      write_json(b_out, result);
      rec.output(b_out);
      rec.write(manifest_for_file(common, b_out));
      out << b_out << "\n";
    };
  });

  // inspect-layout
  auto* inspect = app.add_subcommand("inspect-layout", "Print the predicted layout for a prompt");
  add_common(inspect, common);
  std::string i_ckpt, i_prompt, i_render, i_out;
  std::optional<int> i_size;
  inspect->add_option("--ckpt", i_ckpt, "Checkpoint with a layout decoder")->required();
  inspect->add_option("--prompt", i_prompt, "Concept prompt")->required();
  inspect->add_option("--render", i_render, "Draw the boxes into this PNG");
  inspect->add_option("--size", i_size, "Render canvas side (default diffusion.image_size)");
  inspect->add_option("--out", i_out, "Also write the layout JSON here");
  inspect->callback([&] {
    action = [&] {
      const RunConfig rc = build_config(common);
      RunRecorder rec("inspect-layout", rc);
      const ModelBundle b = load_bundle(i_ckpt);
      const EncoderHandle enc = make_encoder(b.encoder);
      const Layout layout = predict_layout(need_decoder(b, i_ckpt), i_prompt, enc).layout;
      out << dump_layout(layout, 2) << "\n";
      std::optional<fs::path> anchor;
      if (!i_out.empty()) {
        write_json(i_out, layout_to_json(layout));
        rec.output(i_out);
        anchor = i_out;
      }
      if (!i_render.empty()) {
        const int size = i_size ? *i_size : rc.get<int>("diffusion.image_size");
        if (size < 1) throw Error(ErrorCode::OutOfRange, "--size must be >= 1");
        write_png(render_layout(layout, size), i_render);
        rec.output(i_render);
        if (!anchor) anchor = i_render;
      }
      if (!common.run_manifest.empty()) {
        rec.write(common.run_manifest);
      } else if (anchor) {
        rec.write(manifest_for_file(common, *anchor));
      }
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return 0;
    }
    app.exit(e, out, err);
    err << "\n" << app.help();
    return 2;
  }

  try {
    if (action) action();
    return 0;
  } catch (const Error& e) {
    err << "learn: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "learn: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace learn
