// Command-line front end: synthetic data, training, generation, evaluation and
// gradient checks. Every command logs its resolved settings to stderr.
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "gradcheck_ext.hpp"
#include "hatstory/hatstory.hpp"

namespace fs = std::filesystem;
using namespace hatstory;

namespace {

void log_line(const std::string& msg) { std::cerr << "[hatstory] " << msg << '\n'; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

std::string timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

TrainConfig read_config(const std::string& path) {
  if (path.empty()) return TrainConfig{};
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  TrainConfig cfg = j.get<TrainConfig>();
  cfg.validate();
  return cfg;
}

struct EvalInputs {
  Checkpoint ck;
  Dataset data;
  std::string data_hash;
};

EvalInputs load_inputs(const std::string& ckpt_path, const std::string& data_path) {
  EvalInputs in;
  in.ck = load_checkpoint(ckpt_path);
  LoadOptions opts;
  opts.vocab = in.ck.vocab;
  in.data = load_dataset(data_path, opts);
  in.data_hash = hex64(fnv1a64(read_file(data_path)));
  if (in.data.k != in.ck.params.config.k) {
    throw DataError("dataset k=" + std::to_string(in.data.k) + " but checkpoint expects k=" +
                    std::to_string(in.ck.params.config.k));
  }
  log_line("checkpoint " + ckpt_path + " model=" + model_kind_name(in.ck.params.config.kind) +
           " seed=" + std::to_string(in.ck.config.seed) + " config=" + nlohmann::json(in.ck.config).dump());
  log_line("data " + data_path + " albums=" + std::to_string(in.data.albums.size()) + " fnv=" + in.data_hash);
  return in;
}

fs::path report_dir(const std::string& out, const std::string& ckpt_path) {
  fs::path dir = out.empty() ? fs::path(ckpt_path).parent_path() : fs::path(out);
  if (dir.empty()) dir = ".";
  fs::create_directories(dir);
  return dir;
}

void emit_report(MetricReport report, const EvalInputs& in, const fs::path& dir, const std::string& stem) {
  report.fingerprint = report_fingerprint(in.ck.params, in.ck.vocab, in.ck.config);
  report.fingerprint["data"] = in.data_hash;
  write_text(dir / (stem + ".json"), report.to_json().dump(2) + "\n");
  write_text(dir / (stem + ".csv"), report.to_csv());
  for (const auto& [key, value] : report.aggregate) std::printf("%s %s %.6f\n", report.task.c_str(), key.c_str(), value);
  log_line("wrote " + (dir / (stem + ".json")).string() + " and .csv");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchically-attentive album storytelling"};
  app.require_subcommand(1);

  // synth
  SynthSpec spec;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Write a synthetic planted-summary dataset");
  synth->add_option("--albums", spec.albums, "Album count")->capture_default_str();
  synth->add_option("--n", spec.n, "Photos per album")->capture_default_str();
  synth->add_option("--k", spec.k, "Feature width")->capture_default_str();
  synth->add_option("--classes", spec.classes, "Photo classes")->capture_default_str();
  synth->add_option("--seed", spec.seed, "Generator seed")->capture_default_str();
  synth->add_option("--noise-sigma", spec.noise_sigma, "Feature noise")->capture_default_str();
  synth->add_option("--out", synth_out, "Output file (default synth_seed<seed>.jsonl)");

  // train
  std::string data_path;
  std::string config_path;
  std::string out_dir;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write config, loss curve and checkpoint");
  train_cmd->add_option("--data", data_path, "Dataset file")->required();
  train_cmd->add_option("--config", config_path, "TrainConfig JSON (defaults when omitted)");
  train_cmd->add_option("--out", out_dir, "Run directory (default runs/<timestamp>-seed<seed>)");

  // generate
  std::string ckpt_path;
  std::size_t beam = 0;
  std::size_t max_len = 0;
  bool oracle = false;
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("generate", "Generate one story per album");
  gen_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  gen_cmd->add_option("--data", data_path, "Dataset file")->required();
  gen_cmd->add_option("--beam", beam, "Beam size")->check(CLI::IsMember({1, 3}))->default_val(3);
  gen_cmd->add_option("--max-len", max_len, "Sentence length cap (default from checkpoint config)");
  gen_cmd->add_flag("--oracle-selection", oracle, "Use the first ground-truth summary as the selection");
  gen_cmd->add_option("--out", gen_out, "Output JSON-lines file (stdout when omitted)");

  // eval-gen
  auto* eval_gen = app.add_subcommand("eval-gen", "BLEU-3 and CIDEr of generated stories");
  eval_gen->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  eval_gen->add_option("--data", data_path, "Dataset file")->required();
  eval_gen->add_option("--beam", beam, "Beam size (default from checkpoint config)");
  eval_gen->add_option("--max-len", max_len, "Sentence length cap (default from checkpoint config)");
  eval_gen->add_flag("--oracle-selection", oracle, "Use the first ground-truth summary as the selection");
  eval_gen->add_option("--out", out_dir, "Report directory (default: the checkpoint's directory)");

  // eval-summ
  std::string baseline;
  auto* eval_summ = app.add_subcommand("eval-summ", "Summary precision/recall against ground-truth selections");
  eval_summ->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  eval_summ->add_option("--data", data_path, "Dataset file")->required();
  eval_summ->add_option("--baseline", baseline, "attn-agg: top-5 accumulated enc-attn-dec attention")
      ->check(CLI::IsMember({"attn-agg"}));
  eval_summ->add_option("--out", out_dir, "Report directory (default: the checkpoint's directory)");

  // eval-retrieval
  std::size_t pool_size = 0;
  auto* eval_ret = app.add_subcommand("eval-retrieval", "Album retrieval by story likelihood");
  eval_ret->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
  eval_ret->add_option("--data", data_path, "Dataset file")->required();
  eval_ret->add_option("--pool-size", pool_size, "Albums per query pool (0: all)")->capture_default_str();
  eval_ret->add_option("--out", out_dir, "Report directory (default: the checkpoint's directory)");

  // gradcheck
  std::uint64_t gc_seed = 1;
  double gc_step = 1e-5;
  double gc_tol = 1e-4;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient check per module on a toy album");
  gradcheck->add_option("--seed", gc_seed, "Toy instance seed")->capture_default_str();
  gradcheck->add_option("--step", gc_step, "Central-difference step")->capture_default_str();
  gradcheck->add_option("--tol", gc_tol, "Relative error tolerance")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 64;
  }

  try {
    if (synth->parsed()) {
      const std::string path = synth_out.empty() ? "synth_seed" + std::to_string(spec.seed) + ".jsonl" : synth_out;
      log_line("synth " + nlohmann::json{{"albums", spec.albums},
                                         {"n", spec.n},
                                         {"k", spec.k},
                                         {"classes", spec.classes},
                                         {"seed", spec.seed},
                                         {"noise_sigma", spec.noise_sigma}}
                              .dump());
      const SynthDataset sd = synth_generate(spec);
      save_dataset(path, sd.dataset);
      log_line("wrote " + path);
    } else if (train_cmd->parsed()) {
      const TrainConfig cfg = read_config(config_path);
      LoadOptions opts;
      opts.min_count = cfg.min_count;
      const Dataset data = load_dataset(data_path, opts);
      const fs::path dir = out_dir.empty() ? fs::path("runs") / (timestamp() + "-seed" + std::to_string(cfg.seed))
                                           : fs::path(out_dir);
      fs::create_directories(dir);
      const std::string resolved = nlohmann::json(cfg).dump(2);
      log_line("train seed=" + std::to_string(cfg.seed) + " config=" + nlohmann::json(cfg).dump());
      log_line("data " + data_path + " albums=" + std::to_string(data.albums.size()) + " k=" +
               std::to_string(data.k) + " vocab=" + std::to_string(data.vocab.size()));
      write_text(dir / "config.json", resolved + "\n");
      const auto start = std::chrono::steady_clock::now();
      const TrainedModel trained = train_model(data, cfg, [&](const EpochStats& s) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        char buf[160];
        std::snprintf(buf, sizeof buf, "epoch %zu loss %.6f gen %.6f rank %.6f (%.1fs)", s.epoch, s.mean_loss,
                      s.mean_gen_loss, s.mean_rank_loss, secs);
        log_line(buf);
        return true;
      });
      write_text(dir / "loss_curve.csv", loss_curve_csv(trained.result.curve));
      save_checkpoint(trained.params, data.vocab, cfg, (dir / "model.ckpt").string());
      log_line("wrote " + dir.string() + "/{config.json,loss_curve.csv,model.ckpt}");
      std::printf("%s\n", dir.string().c_str());
    } else if (gen_cmd->parsed()) {
      const EvalInputs in = load_inputs(ckpt_path, data_path);
      GenerationOptions opt;
      opt.beam = beam;
      opt.max_len = max_len ? max_len : in.ck.config.max_len;
      opt.oracle_selection = oracle;
      log_line("generate beam=" + std::to_string(opt.beam) + " max_len=" + std::to_string(opt.max_len) +
               " oracle_selection=" + (oracle ? "true" : "false"));
      std::ofstream file;
      if (!gen_out.empty()) {
        file.open(gen_out, std::ios::binary);
        if (!file) throw DataError("cannot open " + gen_out + " for writing");
      }
      std::ostream& os = gen_out.empty() ? std::cout : file;
      for (const Album& album : in.data.albums) {
        const GeneratedStory g = generate_for(in.ck.params, album, opt);
        nlohmann::json line{{"album_id", album.album_id}};
        std::vector<std::string> sentences;
        for (const auto& s : g.story.sentences) sentences.push_back(detokenize(s, in.ck.vocab));
        line["sentences"] = sentences;
        if (in.ck.params.config.kind == ModelKind::kHierarchical) {
          std::vector<std::string> selected;
          for (std::size_t i : g.selection.indices) selected.push_back(album.photo_ids[i]);
          line["selected"] = selected;
        }
        os << line.dump() << '\n';
      }
    } else if (eval_gen->parsed()) {
      const EvalInputs in = load_inputs(ckpt_path, data_path);
      GenerationOptions opt;
      opt.beam = beam ? beam : in.ck.config.beam;
      opt.max_len = max_len ? max_len : in.ck.config.max_len;
      opt.oracle_selection = oracle;
      log_line("eval-gen beam=" + std::to_string(opt.beam) + " max_len=" + std::to_string(opt.max_len) +
               " oracle_selection=" + (oracle ? "true" : "false"));
      emit_report(evaluate_generation(in.ck.params, in.ck.vocab, in.data.albums, opt), in,
                  report_dir(out_dir, ckpt_path), oracle ? "eval_gen_oracle" : "eval_gen");
    } else if (eval_summ->parsed()) {
      const EvalInputs in = load_inputs(ckpt_path, data_path);
      const bool attn = baseline == "attn-agg";
      log_line(std::string("eval-summ baseline=") + (attn ? "attn-agg" : "none"));
      emit_report(evaluate_summarization(in.ck.params, in.data.albums, attn, in.ck.config.beam, in.ck.config.max_len),
                  in, report_dir(out_dir, ckpt_path), attn ? "eval_summ_attn_agg" : "eval_summ");
    } else if (eval_ret->parsed()) {
      const EvalInputs in = load_inputs(ckpt_path, data_path);
      log_line("eval-retrieval pool_size=" + std::to_string(pool_size) +
               " per_word=" + (in.ck.config.retrieval_per_word ? "true" : "false"));
      emit_report(evaluate_retrieval(in.ck.params, in.data.albums, pool_size, in.ck.config.retrieval_per_word), in,
                  report_dir(out_dir, ckpt_path), "eval_retrieval");
    } else if (gradcheck->parsed()) {
      log_line("gradcheck seed=" + std::to_string(gc_seed) + " step=" + std::to_string(gc_step) +
               " tol=" + std::to_string(gc_tol) + " toy: n=2 k=4 |V|=7, total_loss lambda=1");
      const auto standard = gradcheck_suite_standard(gc_seed, gc_step, gc_tol);
      const auto extended = gradcheck_suite_extended(gc_seed, gc_step, gc_tol);
      bool ok = true;
      std::printf("%-20s %8s %14s %14s %s\n", "module", "coords", "err(double)", "err(extended)", "result");
      for (std::size_t i = 0; i < extended.size(); ++i) {
        ok = ok && extended[i].pass;
        std::printf("%-20s %8zu %14.3e %14.3e %s\n", extended[i].module.c_str(), extended[i].coordinates,
                    standard[i].max_rel_err, extended[i].max_rel_err, extended[i].pass ? "PASS" : "FAIL");
      }
      return ok ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
