// hear: data generation, training, streaming evaluation and FLOP tables.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "hear/arm_train.hpp"
#include "hear/metrics.hpp"
#include "hear/policy.hpp"
#include "hear/run_config.hpp"
#include "hear/trainer.hpp"
#include "hear/transcript.hpp"

namespace fs = std::filesystem;
using namespace hear;

namespace {

struct Common {
  std::string config_path;
};

// File config, then HEAR_SEED, then explicit flags (already stored in
// `flags` with their names).
RunConfig resolve(const Common& c, const CLI::App& app,
                  const std::vector<std::pair<std::string, std::function<void(RunConfig&)>>>& flags) {
  RunConfig r = c.config_path.empty() ? RunConfig{} : load_run_config(c.config_path);
  apply_seed_env(r);
  for (const auto& [name, set] : flags)
    if (const auto* opt = app.get_option_no_throw("--" + name); opt && opt->count() > 0) {
      set(r);
      std::string key = name;
      std::replace(key.begin(), key.end(), '-', '_');
      r.explicit_keys.insert(key);
    }
  return r;
}

void write_resolved_config(const fs::path& dir, const RunConfig& cfg, const std::string& command) {
  nlohmann::json j = to_json(cfg);
  j["command"] = command;
  write_file_atomic(dir / "config.json", j.dump(2) + "\n");
}

std::string conll_text(const Dataset& d) { return to_conll_string(d); }

std::vector<EncodedSentence> encode_all(const Vocabulary& vocab, const Dataset& d) {
  std::vector<EncodedSentence> out;
  out.reserve(d.size());
  for (const auto& s : d) out.push_back(encode_sentence(vocab, s));
  return out;
}

// save_* write <prefix>.json and <prefix>.bin; stage both and rename.
void save_atomic(const fs::path& dir, const std::string& name,
                 const std::function<void(const std::string&)>& save) {
  const std::string tmp = (dir / ("." + name + ".tmp")).string();
  save(tmp);
  for (const char* ext : {".bin", ".json"}) {
    std::error_code ec;
    fs::rename(tmp + ext, dir / (name + ext), ec);
    if (ec) throw IoError("cannot move " + tmp + ext + " into place: " + ec.message());
  }
}

std::string strip_suffix(std::string path) {
  for (const char* ext : {".json", ".bin"}) {
    const std::string e = ext;
    if (path.size() > e.size() && path.compare(path.size() - e.size(), e.size(), e) == 0)
      return path.substr(0, path.size() - e.size());
  }
  return path;
}

template <typename F>
void parallel_for(std::size_t n, std::size_t jobs, F&& body) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// ---- gen-data -----------------------------------------------------------------

int run_gen_data(const RunConfig& cfg) {
  if (cfg.out.empty()) throw ConfigError("gen-data needs --out");
  Dataset all;
  nlohmann::json params;
  if (cfg.task == "lookahead") {
    all = gen_lookahead(lookahead_params(cfg));
    params = to_json(lookahead_params(cfg));
  } else if (cfg.task == "local") {
    all = gen_local(local_params(cfg));
    params = to_json(local_params(cfg));
  } else {
    throw ConfigError("unknown task '" + cfg.task + "' (expected lookahead or local)");
  }
  const fs::path dir = cfg.out;
  ensure_directory(dir);
  const Splits s = split_dataset(all);
  nlohmann::json manifest;
  manifest["generator"] = params;
  for (const auto& [name, part] : {std::pair{"train", &s.train}, {"dev", &s.dev}, {"test", &s.test}}) {
    const std::string file = std::string(name) + ".conll";
    write_file_atomic(dir / file, conll_text(*part));
    manifest["splits"][name] = {{"file", file}, {"sentences", part->size()}};
  }
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  write_resolved_config(dir, cfg, "gen-data");
  std::cout << "wrote " << s.train.size() << "/" << s.dev.size() << "/" << s.test.size()
            << " sentences to " << dir.string() << "\n";
  return 0;
}

// ---- train-encoder ------------------------------------------------------------

int run_train_encoder(const RunConfig& cfg) {
  if (cfg.train.empty() || cfg.dev.empty() || cfg.out.empty())
    throw ConfigError("train-encoder needs --train, --dev and --out");
  const Dataset train = read_conll(cfg.train);
  const Dataset dev = read_conll(cfg.dev);
  if (train.empty()) throw InputError(cfg.train + " has no sentences");
  Vocabulary vocab = Vocabulary::build(train);
  for (const auto& s : dev)
    for (const auto& l : s.labels)
      if (!vocab.has_label(l)) throw InputError("dev label '" + l + "' never occurs in train");
  HybridEncoder model(encoder_config(cfg, vocab.token_count(), vocab.label_count()));
  const fs::path dir = cfg.out;
  ensure_directory(dir);
  write_resolved_config(dir, cfg, "train-encoder");

  std::string log;
  auto result = train_encoder(model, encode_all(vocab, train), encode_all(vocab, dev),
                              vocab.labels(), encoder_train_config(cfg),
                              [&](const EpochRecord& r) {
                                nlohmann::json j = {{"epoch", r.epoch},
                                                    {"loss_bi", r.loss_bi},
                                                    {"loss_uni", r.loss_uni},
                                                    {"dev_f1", r.dev_f1}};
                                log += j.dump() + "\n";
                                std::printf("epoch %zu  loss_bi %.6f  loss_uni %.6f  dev_f1 %.4f\n",
                                            r.epoch, r.loss_bi, r.loss_uni, r.dev_f1);
                                std::fflush(stdout);
                              });
  write_file_atomic(dir / "train_log.jsonl", log);
  save_atomic(dir, "encoder", [&](const std::string& p) { save_encoder(p, model, vocab); });
  std::printf("best epoch %zu, dev F1 %.4f, checksum %016llx\n", result.best_epoch,
              result.log[result.best_epoch - 1].dev_f1,
              static_cast<unsigned long long>(model.params().checksum()));
  return 0;
}

// ---- train-arm ----------------------------------------------------------------

std::vector<ProbedSentence> probe_all(const HybridEncoder& enc, const ArmModel& arm,
                                      const std::vector<EncodedSentence>& data, std::size_t jobs) {
  std::vector<ProbedSentence> out(data.size());
  parallel_for(data.size(), jobs, [&](std::size_t i) { out[i] = probe_sentence(enc, arm, data[i], i); });
  return out;
}

nlohmann::json score_json(const BinaryScore& s) {
  return {{"precision", round_sig6(s.precision)},
          {"recall", round_sig6(s.recall)},
          {"f1", round_sig6(s.f1)}};
}

int run_train_arm(RunConfig cfg, const std::string& encoder_path, std::size_t jobs) {
  if (encoder_path.empty() || cfg.train.empty() || cfg.dev.empty() || cfg.out.empty())
    throw ConfigError("train-arm needs --encoder, --train, --dev and --out");
  auto loaded = load_encoder(strip_suffix(encoder_path));
  const HybridConfig& ec = loaded.model.config();
  // Width and heads follow the encoder unless the config pins them.
  if (!cfg.is_explicit("d_model")) cfg.d_model = ec.d_model;
  if (!cfg.is_explicit("heads")) cfg.heads = ec.heads;
  ArmModel arm(arm_config(cfg));
  arm.check_encoder(ec);
  const std::uint64_t checksum = loaded.model.params().checksum();

  const fs::path dir = cfg.out;
  ensure_directory(dir);
  write_resolved_config(dir, cfg, "train-arm");

  const auto train = probe_all(loaded.model, arm, encode_all(loaded.vocab, read_conll(cfg.train)), jobs);
  const auto dev = probe_all(loaded.model, arm, encode_all(loaded.vocab, read_conll(cfg.dev)), jobs);
  std::vector<ArmExample> train_ex, dev_ex;
  for (const auto& p : train) train_ex.push_back(make_example(p));
  for (const auto& p : dev) dev_ex.push_back(make_example(p));

  auto log = train_arm(arm, train_ex, arm_train_config(cfg), [](std::size_t e, double loss) {
    std::printf("arm epoch %zu  bce %.6f\n", e, loss);
    std::fflush(stdout);
  });
  const auto sel = select_postprocessing(arm, dev);
  arm.config().alpha = sel.best.alpha;
  arm.config().beta = sel.best.beta;
  arm.config().exclude_latest = sel.best.exclude_latest;

  if (loaded.model.params().checksum() != checksum)
    throw ContractViolation("encoder parameters changed during restart-module training");

  nlohmann::json report;
  report["intrinsic_dev"] = score_json(arm_intrinsic_f1(arm, dev_ex));
  report["majority_baseline_dev"] = score_json(majority_baseline_f1(dev_ex));
  report["epoch_loss"] = log.epoch_loss;
  report["encoder_checksum"] = checksum;
  report["selected"] = {{"alpha", sel.best.alpha},
                        {"beta", sel.best.beta},
                        {"exclude_latest", sel.best.exclude_latest},
                        {"streaming_em", round_sig6(sel.best.streaming_em)},
                        {"flops_per_example", round_sig6(sel.best.flops_per_example)}};
  for (const auto& g : sel.grid)
    report["grid"].push_back({{"alpha", g.alpha},
                              {"beta", g.beta},
                              {"exclude_latest", g.exclude_latest},
                              {"streaming_em", round_sig6(g.streaming_em)},
                              {"flops_per_example", round_sig6(g.flops_per_example)}});
  save_atomic(dir, "arm", [&](const std::string& p) { save_arm(p, arm, report); });
  write_file_atomic(dir / "arm_report.json", report.dump(2) + "\n");
  std::printf("intrinsic F1 %.4f (majority %.4f); alpha %zu beta %zu exclude_latest %s; dev EM %.4f\n",
              report["intrinsic_dev"]["f1"].get<double>(),
              report["majority_baseline_dev"]["f1"].get<double>(), sel.best.alpha, sel.best.beta,
              sel.best.exclude_latest ? "true" : "false", sel.best.streaming_em);
  return 0;
}

// ---- eval-stream --------------------------------------------------------------

int run_eval_stream(const RunConfig& cfg, const std::string& encoder_path,
                    const std::string& policy_text, const std::string& data_path, std::size_t jobs) {
  if (encoder_path.empty() || data_path.empty() || cfg.out.empty())
    throw ConfigError("eval-stream needs --encoder, --data and --out");
  const PolicySpec spec = parse_policy_spec(policy_text);
  auto loaded = load_encoder(strip_suffix(encoder_path));
  std::optional<ArmModel> arm;
  if (spec.kind == PolicySpec::Kind::kArm) {
    arm.emplace(load_arm(strip_suffix(spec.arm_path)));
    arm->check_encoder(loaded.model.config());
  }
  const Dataset data = read_conll(data_path);
  const auto encoded = encode_all(loaded.vocab, data);
  const fs::path dir = cfg.out;
  ensure_directory(dir);
  RunConfig resolved = cfg;
  resolved.test = data_path;
  write_resolved_config(dir, resolved, "eval-stream --policy " + policy_text + " --encoder " + encoder_path);

  std::vector<StreamingTranscript> transcripts(encoded.size());
  parallel_for(encoded.size(), jobs, [&](std::size_t i) {
    const auto& s = encoded[i];
    switch (spec.kind) {
      case PolicySpec::Kind::kEvery:
        transcripts[i] = run_stream(loaded.model, EveryStep{}, s, i, data[i].tokens);
        break;
      case PolicySpec::Kind::kFixed:
        transcripts[i] = run_stream(loaded.model, FixedK{spec.k}, s, i, data[i].tokens);
        break;
      case PolicySpec::Kind::kArm:
        transcripts[i] = run_stream(loaded.model, ArmPolicy::from(*arm), s, i, data[i].tokens);
        break;
      case PolicySpec::Kind::kOracle: {
        const auto every = run_stream(loaded.model, EveryStep{}, s, i, data[i].tokens);
        transcripts[i] = replay_transcript(every, oracle_schedule(s.labels, prefix_predictions(every)));
        break;
      }
    }
  });

  std::ostringstream lines;
  write_transcripts(lines, transcripts, loaded.vocab.labels());
  write_file_atomic(dir / "transcripts.jsonl", lines.str());
  const Report report = aggregate_report(transcripts, loaded.vocab.labels());
  const std::string json = to_json(report).dump(2) + "\n";
  write_file_atomic(dir / "report.json", json);
  std::cout << json;
  return 0;
}

// ---- bench-flops --------------------------------------------------------------

std::vector<std::size_t> parse_lengths(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("malformed length '" + item + "'");
    const std::size_t n = std::stoul(item);
    if (n < 1) throw ConfigError("lengths must be >= 1");
    out.push_back(n);
  }
  if (out.empty()) throw ConfigError("no lengths given");
  return out;
}

int run_bench_flops(const RunConfig& cfg, const std::string& lengths_text) {
  const auto lengths = parse_lengths(lengths_text);
  const std::size_t layers = cfg.uni_layers + cfg.bi_layers;
  nlohmann::json rows = nlohmann::json::array();
  std::printf("%8s", "length");
  for (std::size_t b = 0; b <= layers; ++b) std::printf("  %14s", ("b=" + std::to_string(b)).c_str());
  std::printf("\n");
  for (std::size_t n : lengths) {
    std::printf("%8zu", n);
    nlohmann::json row = {{"length", n}, {"flops", nlohmann::json::array()}};
    for (std::size_t b = 0; b <= layers; ++b) {
      RunConfig c = cfg;
      c.uni_layers = layers - b;
      c.bi_layers = b;
      c.max_length = std::max(c.max_length, n);
      const FlopCount f = every_step_flops(encoder_config(c, 1, 3), n);
      std::printf("  %14llu", static_cast<unsigned long long>(f));
      row["flops"].push_back({{"uni_layers", layers - b}, {"bi_layers", b}, {"flops", f}});
    }
    std::printf("\n");
    rows.push_back(row);
  }
  if (!cfg.out.empty()) {
    const fs::path dir = cfg.out;
    ensure_directory(dir);
    nlohmann::json j = {{"policy", "every"},
                        {"num_labels", 3},
                        {"d_model", cfg.d_model},
                        {"d_ffn", cfg.d_ffn},
                        {"layers", layers},
                        {"rows", rows}};
    write_file_atomic(dir / "bench_flops.json", j.dump(2) + "\n");
    write_resolved_config(dir, cfg, "bench-flops --lengths " + lengths_text);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming sequence tagging with a hybrid encoder and adaptive restarts"};
  app.require_subcommand(1);
  Common common;
  RunConfig flag;  // flag values land here and are copied over the config
  std::string encoder_path, policy = "every", data_path, lengths = "8,16,32,64";
  std::size_t jobs = 1;
  using Setter = std::pair<std::string, std::function<void(RunConfig&)>>;
  std::vector<Setter> setters;

#define HEAR_FLAG(cmd, name, field, help)                                          \
  cmd->add_option("--" name, flag.field, help);                                    \
  setters.push_back({name, [&flag](RunConfig& r) { r.field = flag.field; }})

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic task and split it 80/10/10");
  auto* tenc = app.add_subcommand("train-encoder", "Train the hybrid encoder");
  auto* tarm = app.add_subcommand("train-arm", "Train the restart module on a frozen encoder");
  auto* eval = app.add_subcommand("eval-stream", "Stream a dataset under a restart policy");
  auto* bench = app.add_subcommand("bench-flops", "Tabulate analytic streaming FLOPs");
  for (auto* cmd : {gen, tenc, tarm, eval, bench})
    cmd->add_option("--config", common.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  for (auto* cmd : {gen, tenc, tarm, eval, bench}) {
    HEAR_FLAG(cmd, "out", out, "Output directory");
    HEAR_FLAG(cmd, "seed", seed, "Random seed");
  }

  gen->add_option("--task", flag.task, "lookahead or local")->check(CLI::IsMember({"lookahead", "local"}));
  setters.push_back({"task", [&flag](RunConfig& r) { r.task = flag.task; }});
  HEAR_FLAG(gen, "sentences", sentences, "Number of sentences");
  HEAR_FLAG(gen, "min-sentence-length", min_sentence_length, "Shortest sentence");
  HEAR_FLAG(gen, "max-sentence-length", max_sentence_length, "Longest sentence");
  HEAR_FLAG(gen, "marker-prob", marker_prob, "Marker probability (lookahead)");
  HEAR_FLAG(gen, "window", window, "Lookahead window w");
  HEAR_FLAG(gen, "alphabet", alphabet, "Alphabet size (local)");

  for (auto* cmd : {tenc, tarm}) {
    HEAR_FLAG(cmd, "train", train, "Training CoNLL file");
    HEAR_FLAG(cmd, "dev", dev, "Dev CoNLL file");
  }
  for (auto* cmd : {tenc, bench}) {
    HEAR_FLAG(cmd, "uni-layers", uni_layers, "Unidirectional layers u");
    HEAR_FLAG(cmd, "bi-layers", bi_layers, "Bidirectional layers b");
    HEAR_FLAG(cmd, "d-model", d_model, "Model width");
    HEAR_FLAG(cmd, "d-ffn", d_ffn, "Feed-forward width");
  }
  HEAR_FLAG(tenc, "heads", heads, "Attention heads");
  HEAR_FLAG(tenc, "epochs", epochs, "Training epochs");
  HEAR_FLAG(tenc, "batch-size", batch_size, "Sentences per batch");
  HEAR_FLAG(tenc, "lr", lr, "Adam learning rate");
  HEAR_FLAG(tarm, "arm-epochs", arm_epochs, "Restart-module epochs");
  HEAR_FLAG(tarm, "arm-lr", arm_lr, "Restart-module learning rate");
  HEAR_FLAG(tarm, "m", m, "Attention-score window");
  HEAR_FLAG(tarm, "d-arm", d_arm, "Restart-module hidden size");

  for (auto* cmd : {tarm, eval}) {
    cmd->add_option("--encoder", encoder_path, "Encoder file prefix")->required();
    cmd->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  }
  eval->add_option("--policy", policy, "every | fixed:<k> | arm:<path> | oracle");
  eval->add_option("--data", data_path, "CoNLL file with gold labels")->required();
  bench->add_option("--lengths", lengths, "Comma-separated sentence lengths");
#undef HEAR_FLAG

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    // Setters registered under several subcommands share names; applying the
    // first one is enough since they write the same field.
    std::vector<Setter> unique;
    for (const auto& s : setters)
      if (std::none_of(unique.begin(), unique.end(), [&](const Setter& u) { return u.first == s.first; }))
        unique.push_back(s);
    CLI::App* cmd = app.get_subcommands().front();
    const RunConfig cfg = resolve(common, *cmd, unique);
    if (cmd == gen) return run_gen_data(cfg);
    if (cmd == tenc) return run_train_encoder(cfg);
    if (cmd == tarm) return run_train_arm(cfg, encoder_path, jobs);
    if (cmd == eval) return run_eval_stream(cfg, encoder_path, policy, data_path, jobs);
    if (cmd == bench) return run_bench_flops(cfg, lengths);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.get_subcommands().front()->help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
