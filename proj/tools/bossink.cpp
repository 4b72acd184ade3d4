// bossink command-line driver. Every subcommand reads and writes files so the
// stages can be chained from a shell.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bossink/bossink.hpp"

namespace fs = std::filesystem;
using namespace bossink;

namespace {

struct Common {
  std::uint64_t seed = 0;
  int threads = 1;
  std::string format = "csv";
  std::string out;
};

std::string out_dir() {
  const char* env = std::getenv("BOSSINK_OUT_DIR");
  return env && *env ? env : ".";
}

std::string default_path(const std::string& stem) { return (fs::path(out_dir()) / stem).string(); }

std::string report_path(const Common& c, const std::string& stem) {
  return c.out.empty() ? default_path(stem + "." + c.format) : c.out;
}

// "<dir>/<name>.<ext>" -> "<dir>/<name>.<suffix>.<ext>"
std::string sibling(const std::string& path, const std::string& suffix) {
  fs::path p(path);
  const std::string ext = p.extension().string();
  p.replace_extension();
  return p.string() + "." + suffix + ext;
}

// Writes via a temporary file so a failed run never leaves a partial report.
void emit(const Report& r, const Common& c, const std::string& path, const ReportHeader& header) {
  const auto fmt = report_format_from_string(c.format);
  const std::string tmp = path + ".tmp";
  write_report(r, fmt, tmp, header);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move report into place at '" + path + "': " + ec.message());
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
  return s;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string join(const std::vector<std::string>& v, const char* sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + v[i];
  return s;
}

ReportHeader base_header(const std::string& command, const Common& c) {
  return {{"command", command},
          {"seed", std::to_string(c.seed)},
          {"threads", std::to_string(c.threads)},
          {"format", c.format}};
}

HeadId parse_head(const std::string& s) {
  const auto colon = s.find(':');
  try {
    if (colon == std::string::npos) throw std::invalid_argument(s);
    return {std::stoul(s.substr(0, colon)), std::stoul(s.substr(colon + 1))};
  } catch (const std::exception&) {
    throw ConfigError("bad head '" + s + "' (expected layer:head)");
  }
}

// role@layer:head
PlantedHead parse_plant(const std::string& s) {
  const auto at = s.find('@');
  if (at == std::string::npos) throw ConfigError("bad planted head '" + s + "' (expected role@layer:head)");
  const auto id = parse_head(s.substr(at + 1));
  return {id.first, id.second, head_role_from_string(s.substr(0, at))};
}

std::vector<Prompt> corpus_prompts(const std::string& corpus, std::size_t n, std::size_t len,
                                   std::uint64_t seed) {
  return cut_prompts(load_corpus(corpus), n, len, seed);
}

// Strategy and removed-unit count of the last prune recorded on a checkpoint.
std::pair<std::string, std::string> prune_record(const Checkpoint& ck) {
  for (auto it = ck.provenance.rbegin(); it != ck.provenance.rend(); ++it) {
    if (it->rfind("prune ", 0) != 0) continue;
    std::istringstream ss(it->substr(6));
    std::string tok, strategy = "dense", ratio = "0", removed = "0";
    while (ss >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) continue;
      const auto k = tok.substr(0, eq), v = tok.substr(eq + 1);
      if (k == "strategy") strategy = v;
      if (k == "ratio") ratio = v;
      if (k == "removed") removed = v;
    }
    // A prune that removed nothing leaves the dense model.
    if (removed == "0") return {"dense", "0"};
    return {strategy, ratio};
  }
  return {"dense", "0"};
}

struct EvalOptions {
  std::string corpus;
  std::size_t seq_len = 64;
  std::size_t n_items = 64;
  std::size_t prompt_len = 16;
  std::size_t n_options = 4;

  void add(CLI::App* app) {
    app->add_option("--corpus", corpus, "Perplexity corpus (UTF-8 text)")->required();
    app->add_option("--seq-len", seq_len, "Perplexity window length")->capture_default_str();
    app->add_option("--n-items", n_items, "Recall items for the choice task")->capture_default_str();
    app->add_option("--prompt-len", prompt_len, "Tokens per recall prompt")->capture_default_str();
    app->add_option("--n-options", n_options, "Options per recall item")->capture_default_str();
  }

  EvalData data(const Checkpoint& ck, std::uint64_t seed) const {
    return {load_corpus(corpus), seq_len,
            make_recall_items(n_items, prompt_len, n_options, seed, ck.config.vocab_size)};
  }

  void describe(ReportHeader& h) const {
    h.push_back({"corpus", corpus});
    h.push_back({"seq_len", std::to_string(seq_len)});
    h.push_back({"n_items", std::to_string(n_items)});
    h.push_back({"prompt_len", std::to_string(prompt_len)});
    h.push_back({"n_options", std::to_string(n_options)});
    h.push_back({"choice_protocol", "zero-shot"});
  }
};

void add_common(CLI::App* app, Common& c, bool with_format = true) {
  app->add_option("--seed", c.seed, "Seed for every random choice")->capture_default_str();
  app->add_option("--threads", c.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  if (with_format) {
    app->add_option("--format", c.format, "Report format")
        ->capture_default_str()
        ->check(CLI::IsMember({"csv", "json"}));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BOS-sink analysis and structured pruning for small decoder-only transformers"};
  app.require_subcommand(1);
  Common common;

  // make-fixture ------------------------------------------------------------
  auto* mk = app.add_subcommand("make-fixture", "Build a synthetic checkpoint");
  std::string kind = "planted";
  std::vector<std::string> plants;
  add_common(mk, common, false);
  mk->add_option("--kind", kind, "planted | uniform | random | zero-block")
      ->capture_default_str()
      ->check(CLI::IsMember({"planted", "uniform", "random", "zero-block"}));
  mk->add_option("--plant", plants, "Planted head role@layer:head (replaces the default set)");
  mk->add_option("--out", common.out, "Checkpoint path prefix");

  // scan --------------------------------------------------------------------
  auto* scan = app.add_subcommand("scan", "Score every head or layer");
  std::string checkpoint, corpus, metric = "bos_head";
  std::size_t n_prompts = 8, seq_len = 64;
  add_common(scan, common);
  scan->add_option("--checkpoint", checkpoint, "Checkpoint path prefix")->required();
  scan->add_option("--corpus", corpus, "Prompt corpus (UTF-8 text); not needed for mag");
  scan->add_option("--metric", metric, "bos_head | bos_layer | bi | mag | wanda")->capture_default_str();
  scan->add_option("--n-prompts", n_prompts, "Prompts cut from the corpus")->capture_default_str();
  scan->add_option("--seq-len", seq_len, "Tokens per prompt")->capture_default_str();
  scan->add_option("--out", common.out, "Report path");

  // prune -------------------------------------------------------------------
  auto* prune = app.add_subcommand("prune", "Rank, remove and save a pruned checkpoint");
  std::string strategy, scores;
  double ratio = 0.0;
  add_common(prune, common, false);
  prune->add_option("--checkpoint", checkpoint, "Checkpoint path prefix")->required();
  prune->add_option("--strategy", strategy,
                    "bos_head_desc | bos_layer_desc | bi_asc | mag_asc | wanda_asc | bottom_up | top_down")
      ->required();
  prune->add_option("--ratio", ratio, "Fraction of units to remove")->required();
  prune->add_option("--scores", scores, "Score report to rank by instead of scanning");
  prune->add_option("--corpus", corpus, "Prompt corpus for the scan");
  prune->add_option("--n-prompts", n_prompts, "Prompts cut from the corpus")->capture_default_str();
  prune->add_option("--seq-len", seq_len, "Tokens per prompt")->capture_default_str();
  prune->add_option("--out", common.out, "Output checkpoint path prefix");

  // eval --------------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "Perplexity and recall accuracy of a checkpoint");
  EvalOptions eval_opts;
  add_common(ev, common);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint path prefix")->required();
  eval_opts.add(ev);
  ev->add_option("--out", common.out, "Report path");

  // sweep -------------------------------------------------------------------
  auto* sw = app.add_subcommand("sweep", "Single-target ablation sweep or pruning-ratio sweep");
  EvalOptions sweep_opts;
  std::string mode = "single", evaluator = "choice", ratios = "0,0.0625,0.125,0.25";
  std::size_t scan_len = 32;
  add_common(sw, common);
  sw->add_option("--checkpoint", checkpoint, "Checkpoint path prefix")->required();
  sw->add_option("--mode", mode, "single | ratio")->capture_default_str()->check(CLI::IsMember({"single", "ratio"}));
  sw->add_option("--metric", metric, "Score table swept in single mode")->capture_default_str();
  sw->add_option("--evaluator", evaluator, "choice | perplexity (single mode)")
      ->capture_default_str()
      ->check(CLI::IsMember({"choice", "perplexity"}));
  sw->add_option("--strategy", strategy, "Strategy for ratio mode");
  sw->add_option("--ratios", ratios, "Comma-separated ascending ratios")->capture_default_str();
  sw->add_option("--n-prompts", n_prompts, "Scoring prompts")->capture_default_str();
  sw->add_option("--scan-len", scan_len, "Tokens per scoring prompt")->capture_default_str();
  sweep_opts.add(sw);
  sw->add_option("--out", common.out, "Report path");

  // lengths -----------------------------------------------------------------
  auto* ln = app.add_subcommand("lengths", "BOS scores across prompt lengths");
  std::string lengths = "8,16,32,64";
  add_common(ln, common);
  ln->add_option("--checkpoint", checkpoint, "Checkpoint path prefix")->required();
  ln->add_option("--corpus", corpus, "Prompt corpus (UTF-8 text)")->required();
  ln->add_option("--lengths", lengths, "Comma-separated prompt lengths")->capture_default_str();
  ln->add_option("--n-prompts", n_prompts, "Prompts per length")->capture_default_str();
  ln->add_option("--out", common.out, "Report path");

  // patterns ----------------------------------------------------------------
  auto* pt = app.add_subcommand("patterns", "Label every head bos_sink / diagonal / uniform / random");
  PatternThresholds th;
  add_common(pt, common);
  pt->add_option("--checkpoint", checkpoint, "Checkpoint path prefix")->required();
  pt->add_option("--corpus", corpus, "Prompt corpus (UTF-8 text)")->required();
  pt->add_option("--n-prompts", n_prompts, "Prompts cut from the corpus")->capture_default_str();
  pt->add_option("--seq-len", seq_len, "Tokens per prompt")->capture_default_str();
  pt->add_option("--bos-threshold", th.bos)->capture_default_str();
  pt->add_option("--diagonal-threshold", th.diagonal)->capture_default_str();
  pt->add_option("--entropy-threshold", th.entropy)->capture_default_str();
  pt->add_option("--out", common.out, "Report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "bossink: error: " << e.what() << "\n";
    return 1;
  }

  auto split_doubles = [](const std::string& s) {
    std::vector<double> v;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
      try {
        v.push_back(std::stod(part));
      } catch (const std::exception&) {
        throw ConfigError("bad number '" + part + "' in list '" + s + "'");
      }
    }
    return v;
  };
  auto split_sizes = [&](const std::string& s) {
    std::vector<std::size_t> v;
    for (double d : split_doubles(s)) {
      if (d < 1 || d != static_cast<double>(static_cast<std::size_t>(d))) {
        throw ConfigError("bad length '" + format_double(d) + "' in list '" + s + "'");
      }
      v.push_back(static_cast<std::size_t>(d));
    }
    return v;
  };

  try {
    if (mk->parsed()) {
      Checkpoint ck;
      if (kind == "zero-block") {
        ck = build_zero_block_model(planted_fixture_config(), common.seed);
      } else {
        SinkRecipe r = kind == "planted" ? default_planted_recipe(common.seed)
                       : kind == "uniform" ? uniform_recipe(common.seed)
                                           : random_recipe(common.seed);
        if (!plants.empty()) {
          r.heads.clear();
          for (const auto& p : plants) r.heads.push_back(parse_plant(p));
        }
        ck = build_synthetic_model(r);
      }
      const std::string path = common.out.empty() ? default_path("fixture") : common.out;
      save_checkpoint(ck, path);
      std::cout << path << "\n";
    } else if (scan->parsed()) {
      const Checkpoint ck = load_checkpoint(checkpoint);
      const Metric m = metric_from_string(metric);
      std::vector<Prompt> prompts;
      if (m != Metric::mag || !corpus.empty()) {
        if (corpus.empty()) throw ConfigError("scan --metric " + metric + " needs --corpus");
        prompts = corpus_prompts(corpus, n_prompts, seq_len, common.seed);
      }
      const ScoreTable t = scan_model(ck, prompts, m, common.threads);
      auto h = base_header("scan", common);
      h.insert(h.end(), {{"checkpoint", checkpoint}, {"corpus", corpus}, {"metric", metric},
                         {"n_prompts", std::to_string(t.n_samples)}, {"seq_len", std::to_string(seq_len)}});
      if (!t.warnings.empty()) h.push_back({"warnings", join(t.warnings, "; ")});
      const auto path = report_path(common, "scan_" + metric);
      h.push_back({"output", path});
      emit(score_table_report(t), common, path, h);
      std::cout << path << "\n";
    } else if (prune->parsed()) {
      const Checkpoint ck = load_checkpoint(checkpoint);
      const Strategy s = strategy_from_string(strategy);
      PruneSpec spec;
      std::string source = "positional";
      if (is_positional(s)) {
        spec = rank_positional(ck.config.n_layers, s, ratio);
      } else if (!scores.empty()) {
        spec = rank_targets(score_table_from_report(read_report(scores)), s, ratio);
        source = scores;
      } else {
        std::vector<Prompt> prompts;
        if (metric_of(s) != Metric::mag) {
          if (corpus.empty()) throw ConfigError("prune --strategy " + strategy + " needs --corpus or --scores");
          prompts = corpus_prompts(corpus, n_prompts, seq_len, common.seed);
        }
        spec = rank_targets(scan_model(ck, prompts, metric_of(s), common.threads), s, ratio);
        source = corpus.empty() ? "weights" : "scan of " + corpus;
      }
      if (spec.n_layers != ck.config.n_layers ||
          (spec.granularity == Granularity::head && spec.n_heads > ck.config.n_heads)) {
        throw InputError("score table does not match checkpoint '" + checkpoint + "'");
      }
      const Checkpoint out = apply_prune(ck, spec);
      const std::string path = common.out.empty() ? default_path("pruned") : common.out;
      json record = prune_spec_to_json(spec);
      record["run_config"] = {{"command", "prune"},          {"checkpoint", checkpoint},
                              {"strategy", strategy},        {"ratio", ratio},
                              {"scores", source},            {"seed", common.seed},
                              {"n_prompts", n_prompts},      {"seq_len", seq_len},
                              {"threads", common.threads},   {"output", path}};
      save_checkpoint(out, path);
      detail::write_file(path + ".prune.json", record.dump(2) + "\n");
      std::cout << path << "\n";
    } else if (ev->parsed()) {
      const Checkpoint ck = load_checkpoint(checkpoint);
      EvalReport r = evaluate(ck, eval_opts.data(ck, common.seed), common.threads);
      const auto [strat, rat] = prune_record(ck);
      r.strategy = strat;
      r.prune_ratio = std::stod(rat);
      for (const auto& p : ck.provenance) {
        const auto k = p.find(" removed=");
        if (strat != "dense" && p.rfind("prune ", 0) == 0 && k != std::string::npos) {
          r.n_removed = std::stoul(p.substr(k + 9));
        }
      }
      auto h = base_header("eval", common);
      h.push_back({"checkpoint", checkpoint});
      h.push_back({"provenance", join(ck.provenance, " | ")});
      eval_opts.describe(h);
      const auto path = report_path(common, "eval");
      h.push_back({"output", path});
      emit(eval_report({r}), common, path, h);
      std::cout << path << "\n";
    } else if (sw->parsed()) {
      const Checkpoint ck = load_checkpoint(checkpoint);
      const EvalData data = sweep_opts.data(ck, common.seed);
      auto h = base_header("sweep", common);
      h.push_back({"checkpoint", checkpoint});
      h.push_back({"mode", mode});
      sweep_opts.describe(h);
      const auto score_prompts = [&] {
        return corpus_prompts(sweep_opts.corpus, n_prompts, scan_len, common.seed);
      };
      if (mode == "single") {
        const ScoreTable t = scan_model(ck, score_prompts(), metric_from_string(metric), common.threads);
        const Evaluator e = evaluator == "choice" ? choice_evaluator(data.items)
                                                  : perplexity_evaluator(data.stream, data.seq_len);
        const SweepResult s = single_target_sweep(ck, t, e, common.threads);
        h.insert(h.end(), {{"metric", metric}, {"evaluator", evaluator},
                           {"n_prompts", std::to_string(n_prompts)}, {"scan_len", std::to_string(scan_len)},
                           {"dense_value", format_double(s.dense_value)}});
        const auto path = report_path(common, "sweep_" + metric);
        h.push_back({"output", path});
        emit(sweep_report(s), common, path, h);
        emit(layer_trend_report(s), common, sibling(path, "layers"), h);
        std::cout << path << "\n";
      } else {
        if (strategy.empty()) throw ConfigError("sweep --mode ratio needs --strategy");
        const Strategy s = strategy_from_string(strategy);
        std::optional<ScoreTable> t;
        if (!is_positional(s)) t = scan_model(ck, score_prompts(), metric_of(s), common.threads);
        const auto rs = split_doubles(ratios);
        const auto reports = ratio_sweep(ck, s, rs, t ? &*t : nullptr, data, common.threads);
        h.insert(h.end(), {{"strategy", strategy}, {"ratios", join(rs)},
                           {"n_prompts", std::to_string(n_prompts)}, {"scan_len", std::to_string(scan_len)}});
        const auto path = report_path(common, "ratios_" + strategy);
        h.push_back({"output", path});
        emit(eval_report(reports), common, path, h);
        std::cout << path << "\n";
      }
    } else if (ln->parsed()) {
      const Checkpoint ck = load_checkpoint(checkpoint);
      const auto ls = split_sizes(lengths);
      const auto series = length_sweep(ck, load_corpus(corpus), ls, n_prompts, common.seed, common.threads);
      auto h = base_header("lengths", common);
      h.insert(h.end(), {{"checkpoint", checkpoint}, {"corpus", corpus}, {"lengths", join(ls)},
                         {"n_prompts", std::to_string(n_prompts)}, {"prompts", "nested prefixes"}});
      const auto path = report_path(common, "lengths");
      h.push_back({"output", path});
      emit(length_series_report(series), common, path, h);
      emit(cohort_report(standard_cohorts(series)), common, sibling(path, "cohorts"), h);
      std::cout << path << "\n";
    } else if (pt->parsed()) {
      const Checkpoint ck = load_checkpoint(checkpoint);
      const auto labels = classify_model(ck, corpus_prompts(corpus, n_prompts, seq_len, common.seed), th,
                                         common.threads);
      auto h = base_header("patterns", common);
      h.insert(h.end(), {{"checkpoint", checkpoint}, {"corpus", corpus},
                         {"n_prompts", std::to_string(n_prompts)}, {"seq_len", std::to_string(seq_len)},
                         {"bos_threshold", format_double(th.bos)},
                         {"diagonal_threshold", format_double(th.diagonal)},
                         {"entropy_threshold", format_double(th.entropy)}});
      const auto path = report_path(common, "patterns");
      h.push_back({"output", path});
      emit(pattern_report(labels), common, path, h);
      std::cout << path << "\n";
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (auto& ch : msg) {
      if (ch == '\n') ch = ' ';
    }
    std::cerr << "bossink: error: " << msg << "\n";
    return 1;
  }
  return 0;
}
