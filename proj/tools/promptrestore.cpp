#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "promptrestore/harness.hpp"
#include "promptrestore/service.hpp"
#include "promptrestore/train.hpp"

using namespace promptrestore;

namespace {

RestorationService* g_service = nullptr;

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<DegradationType> parse_tasks(const std::string& text) {
  std::vector<DegradationType> tasks;
  for (const auto& name : split_list(text)) tasks.push_back(parse_degradation(name));
  return tasks;
}

TextEncoderBundle default_text_encoder(uint64_t seed) {
  std::clog << "no --textenc given: fine-tuning a tiny encoder on the default corpus\n";
  auto corpus = InstructionCorpus::generate(seed, 50);
  FinetuneOptions options;
  options.seed = seed;
  options.log_every = 0;
  auto result = finetune(corpus, TextEncoderConfig::tiny(corpus.vocab_size()), options);
  auto centroids = compute_centroids(result.encoder, corpus, Split::train);
  return {result.encoder, std::move(corpus), std::move(centroids)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-guided all-in-one image restoration"};
  app.require_subcommand(1);

  // corpus
  auto* corpus_cmd = app.add_subcommand("corpus", "Instruction corpus tools");
  corpus_cmd->require_subcommand(1);
  auto* corpus_gen = corpus_cmd->add_subcommand("generate", "Write a generated instruction corpus");
  uint64_t corpus_seed = 0;
  int per_category = 50;
  std::string corpus_out;
  corpus_gen->add_option("--seed", corpus_seed, "Generator seed");
  corpus_gen->add_option("--per-category", per_category, "Sentences per category")->check(CLI::Range(10, 100000));
  corpus_gen->add_option("--out", corpus_out, "Output corpus path")->required();

  // textenc
  auto* textenc_cmd = app.add_subcommand("textenc", "Instruction encoder");
  textenc_cmd->require_subcommand(1);
  auto* ft_cmd = textenc_cmd->add_subcommand("finetune", "Fine-tune the encoder with MLM + sentence-pair losses");
  std::string ft_corpus, ft_out, ft_preset = "tiny", ft_log;
  FinetuneOptions ft_options;
  ft_cmd->add_option("--corpus", ft_corpus, "Corpus file")->required();
  ft_cmd->add_option("--steps", ft_options.steps, "Optimizer steps")->required();
  ft_cmd->add_option("--out", ft_out, "Checkpoint path")->required();
  ft_cmd->add_option("--preset", ft_preset, "tiny|paper")->check(CLI::IsMember({"tiny", "paper"}));
  ft_cmd->add_option("--lr", ft_options.lr, "Learning rate");
  ft_cmd->add_option("--batch", ft_options.batch_size, "Sentence pairs per step");
  ft_cmd->add_option("--seed", ft_options.seed, "Seed");
  ft_cmd->add_option("--log", ft_log, "JSON-lines loss log");
  auto* embed_cmd = textenc_cmd->add_subcommand("embed", "Print the guidance vector of a sentence as JSON");
  std::string embed_ckpt, embed_text_arg;
  embed_cmd->add_option("--ckpt", embed_ckpt, "Text encoder checkpoint")->required();
  embed_cmd->add_option("--text", embed_text_arg, "Instruction")->required();

  // degrade
  auto* degrade_cmd = app.add_subcommand("degrade", "Synthetic degradations");
  degrade_cmd->require_subcommand(1);
  auto* synth_cmd = degrade_cmd->add_subcommand("synth", "Degrade an image");
  std::string synth_kind, synth_in, synth_out, synth_params;
  uint64_t synth_seed = 0;
  double sigma = 25.0;
  RainParams rain;
  HazeParams haze;
  double airlight = 0.85;
  synth_cmd->add_option("--kind", synth_kind, "noise|rain|haze, or a comma list composed in physical order")
      ->required();
  synth_cmd->add_option("--in", synth_in, "Clean input image")->required();
  synth_cmd->add_option("--out", synth_out, "Degraded output image")->required();
  synth_cmd->add_option("--seed", synth_seed, "Seed");
  synth_cmd->add_option("--sigma", sigma, "Noise level on the 0-255 scale");
  synth_cmd->add_option("--density", rain.density, "Rain streaks per megapixel");
  synth_cmd->add_option("--angle", rain.angle_deg, "Rain angle from vertical (degrees)");
  synth_cmd->add_option("--length", rain.length, "Rain streak length (pixels)");
  synth_cmd->add_option("--intensity", rain.intensity, "Rain intensity");
  synth_cmd->add_option("--beta", haze.beta, "Haze scattering coefficient");
  synth_cmd->add_option("--airlight", airlight, "Haze airlight");
  synth_cmd->add_option("--params", synth_params, "Degradation spec list as JSON (overrides the flags)");

  // metrics
  auto* metrics_cmd = app.add_subcommand("metrics", "PSNR/SSIM between two images");
  std::string metric_a, metric_b;
  metrics_cmd->add_option("restored", metric_a, "Restored image")->required();
  metrics_cmd->add_option("reference", metric_b, "Reference image")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the restoration backbone");
  std::string train_preset = "tiny", train_tasks = "noise,rain,haze", train_out, train_textenc, train_log,
              train_images_dir, train_config, train_resume, train_loss = "l1", train_schedule = "constant";
  TrainConfig train_cfg;
  int train_image_count = 8, train_image_size = 64;
  bool no_sgi = false;
  train_cmd->add_option("--preset", train_preset, "tiny|paper")->check(CLI::IsMember({"tiny", "paper"}));
  train_cmd->add_option("--config", train_config, "Backbone config file (key = value), overrides --preset");
  train_cmd->add_option("--tasks", train_tasks, "Comma-separated task set");
  train_cmd->add_option("--steps", train_cfg.steps, "Optimizer steps")->required();
  train_cmd->add_option("--seed", train_cfg.seed, "Seed");
  train_cmd->add_option("--out", train_out, "Checkpoint path")->required();
  train_cmd->add_option("--textenc", train_textenc, "Text encoder checkpoint");
  train_cmd->add_option("--lr", train_cfg.lr, "Learning rate");
  train_cmd->add_option("--batch", train_cfg.batch_size, "Batch size");
  train_cmd->add_option("--patch", train_cfg.patch, "Patch size");
  train_cmd->add_option("--loss", train_loss, "l1|l2")->check(CLI::IsMember({"l1", "l2"}));
  train_cmd->add_option("--schedule", train_schedule, "constant|cosine")->check(CLI::IsMember({"constant", "cosine"}));
  train_cmd->add_option("--checkpoint-every", train_cfg.checkpoint_every, "Periodic checkpoint cadence");
  train_cmd->add_option("--log-every", train_cfg.log_every, "Log cadence");
  train_cmd->add_option("--log", train_log, "JSON-lines training log (default stdout)");
  train_cmd->add_option("--images", train_images_dir, "Directory of clean training images (default synthetic)");
  train_cmd->add_option("--synthetic-count", train_image_count, "Number of synthetic clean images");
  train_cmd->add_option("--synthetic-size", train_image_size, "Side of synthetic clean images");
  train_cmd->add_option("--resume", train_resume, "Resume from a training checkpoint");
  train_cmd->add_flag("--no-sgi", no_sgi, "Disable semantic guidance");
  train_cmd->add_flag("--finetune-textenc", train_cfg.finetune_text_encoder, "Update the text encoder too");

  // harness
  auto* harness_cmd = app.add_subcommand("harness", "Experiment grid");
  harness_cmd->require_subcommand(1);
  auto* harness_run = harness_cmd->add_subcommand("run", "Run an experiment plan");
  std::string plan_path;
  harness_run->add_option("--plan", plan_path, "Plan JSON")->required();

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "HTTP inference service");
  std::string ckpt_backbone, ckpt_textenc, addr = "127.0.0.1:8080";
  ServiceConfig service_cfg;
  if (const char* env = std::getenv("PROMPTRESTORE_MAX_PIXELS")) service_cfg.max_pixels = std::atoll(env);
  serve_cmd->add_option("--ckpt-backbone", ckpt_backbone, "Backbone checkpoint")->required();
  serve_cmd->add_option("--ckpt-textenc", ckpt_textenc, "Text encoder checkpoint")->required();
  serve_cmd->add_option("--addr", addr, "HOST:PORT");
  serve_cmd->add_option("--max-pixels", service_cfg.max_pixels, "Largest accepted image (pixels)");
  serve_cmd->add_option("--max-in-flight", service_cfg.max_in_flight, "Concurrent request limit");

  CLI11_PARSE(app, argc, argv);

  try {
    if (corpus_gen->parsed()) {
      const auto corpus = InstructionCorpus::generate(corpus_seed, per_category);
      corpus.save(corpus_out);
      std::cout << "wrote " << corpus.instructions().size() << " sentences to " << corpus_out << " (vocabulary "
                << corpus.vocab_size() << " tokens)\n";
    } else if (ft_cmd->parsed()) {
      const auto corpus = InstructionCorpus::load(ft_corpus);
      const auto cfg = ft_preset == "paper" ? TextEncoderConfig::paper(corpus.vocab_size())
                                            : TextEncoderConfig::tiny(corpus.vocab_size());
      auto result = finetune(corpus, cfg, ft_options);
      if (!ft_log.empty()) {
        std::ofstream log(ft_log);
        for (const auto& e : result.log) {
          log << nlohmann::json{{"step", e.step}, {"mlm_loss", e.mlm_loss}, {"pair_loss", e.pair_loss}}.dump()
              << "\n";
        }
      }
      save_text_encoder(ft_out, result.encoder, corpus,
                        {{"steps", ft_options.steps}, {"lr", ft_options.lr}, {"seed", ft_options.seed}});
      std::cout << "final loss " << result.log.back().loss() << ", wrote " << ft_out << "\n";
    } else if (embed_cmd->parsed()) {
      auto bundle = load_text_encoder(embed_ckpt);
      const auto tokens = bundle.corpus.tokenize(embed_text_arg);
      const bool truncated = tokens.length() > static_cast<size_t>(bundle.encoder->config().max_len);
      const auto z = embed_text(bundle.encoder, bundle.corpus, embed_text_arg);
      const std::vector<double> zd(z.values.begin(), z.values.end());
      std::cout << nlohmann::json{{"text", embed_text_arg},
                                  {"z", z.values},
                                  {"truncated", truncated},
                                  {"nearest_category", std::string(to_string(bundle.centroids.nearest(zd)))}}
                       .dump()
                << "\n";
    } else if (synth_cmd->parsed()) {
      std::vector<DegradationSpec> specs;
      if (!synth_params.empty()) {
        auto j = nlohmann::json::parse(synth_params);
        if (!j.is_array()) j = nlohmann::json::array({j});
        for (const auto& item : j) specs.push_back(DegradationSpec::from_json(item));
      } else {
        haze.airlight = {airlight, airlight, airlight};
        for (auto kind : parse_tasks(synth_kind)) {
          if (kind == DegradationType::noise) specs.push_back(DegradationSpec::noise(sigma / 255.0));
          if (kind == DegradationType::rain) specs.push_back(DegradationSpec::rain(rain));
          if (kind == DegradationType::haze) specs.push_back(DegradationSpec::haze(haze));
        }
      }
      specs = physical_order(specs);
      Rng rng(synth_seed);
      const auto degraded = compose(read_image(synth_in), specs, rng);
      write_image(synth_out, degraded);
      for (const auto& s : specs) {
        std::cout << manifest_line({synth_in, s, ""}) << "\n";
      }
    } else if (metrics_cmd->parsed()) {
      const auto a = read_image(metric_a);
      const auto b = read_image(metric_b);
      const double p = psnr(a, b);
      std::cout << nlohmann::json{{"psnr", std::isinf(p) ? nlohmann::json("inf") : nlohmann::json(p)},
                                  {"ssim", ssim(a, b)}}
                       .dump()
                << "\n";
    } else if (train_cmd->parsed()) {
      auto bundle = train_textenc.empty() ? default_text_encoder(train_cfg.seed) : load_text_encoder(train_textenc);
      GuidanceProvider guidance(bundle.encoder, bundle.corpus, train_cfg.finetune_text_encoder);
      auto backbone = train_config.empty() ? BackboneConfig::preset(train_preset)
                                           : BackboneConfig::from_text(read_file(train_config));
      backbone.sgi_enabled = !no_sgi;
      backbone.d_text = guidance.d_model();
      train_cfg.tasks = parse_tasks(train_tasks);
      train_cfg.loss = train_loss == "l1" ? LossKind::l1 : LossKind::l2;
      train_cfg.schedule = train_schedule == "constant" ? Schedule::constant : Schedule::cosine;
      if (train_preset == "paper" && train_images_dir.empty()) train_image_size = std::max(train_image_size, 256);
      train_cfg.patch = std::min(train_cfg.patch, train_image_size);
      train_cfg.validate();

      std::vector<Image> cleans;
      if (!train_images_dir.empty()) {
        for (const auto& entry : std::filesystem::directory_iterator(train_images_dir)) {
          if (entry.is_regular_file()) cleans.push_back(read_image(entry.path()));
        }
        if (cleans.empty()) throw NotFound("no images in " + train_images_dir);
      } else {
        Rng rng(train_cfg.seed);
        cleans = synthetic_clean_images(train_image_count, train_image_size, train_image_size, rng);
      }

      TrainState state = train_resume.empty() ? make_train_state(backbone, train_cfg, guidance)
                                              : load_train_state(train_resume, guidance);
      if (!train_resume.empty()) state.config.steps = train_cfg.steps;
      SyntheticPairStream stream(cleans, state.config.task_mix(), bundle.corpus, state.config.patch,
                                 state.config.batch_size);
      std::ofstream log_file;
      FitHooks hooks;
      hooks.checkpoint_prefix = train_out;
      if (!train_log.empty()) {
        log_file.open(train_log);
        hooks.log_stream = &log_file;
      } else {
        hooks.log_stream = &std::cout;
      }
      fit(state, guidance, stream, hooks);
      save_train_state(train_out, state, guidance);
      std::clog << "wrote " << train_out << " at step " << state.step << "\n";
    } else if (harness_run->parsed()) {
      Harness harness(ExperimentPlan::load(plan_path), &std::clog);
      for (const auto& report : harness.run()) std::cout << report.render();
    } else if (serve_cmd->parsed()) {
      const auto colon = addr.rfind(':');
      if (colon == std::string::npos) throw InvalidArgument("--addr must be HOST:PORT");
      service_cfg.host = addr.substr(0, colon);
      service_cfg.port = std::stoi(addr.substr(colon + 1));
      RestorationService service(service_cfg);
      service.load_checkpoints(ckpt_backbone, ckpt_textenc);
      g_service = &service;
      std::signal(SIGINT, [](int) {
        if (g_service) g_service->stop();
      });
      std::clog << "serving on " << addr << "\n";
      if (!service.listen()) {
        std::cerr << "error: cannot listen on " << addr << "\n";
        return 1;
      }
    }
  } catch (const TrainingFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
