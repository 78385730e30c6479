// Command-line front end: training stages, translation, evaluation and
// diagnostics as reproducible runs. Exit codes: 0 success, 1 usage or
// configuration error, 2 runtime failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "advnmt/adversary.hpp"
#include "advnmt/bleu.hpp"
#include "advnmt/config.hpp"
#include "advnmt/data.hpp"
#include "advnmt/decode.hpp"
#include "advnmt/generator.hpp"
#include "advnmt/gradcheck.hpp"
#include "advnmt/report.hpp"
#include "advnmt/trainer.hpp"
#include "advnmt/vocab.hpp"

namespace fs = std::filesystem;
using namespace advnmt;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required = true) {
  auto* c = cmd->add_option("--config", opts.config_path, "run configuration file (key = value lines)");
  if (config_required) c->required();
  cmd->add_option("--set", opts.overrides, "override a config key, e.g. --set lr_g=0.05")->take_all();
  cmd->add_option("--out", opts.out_dir, "output directory (overrides config and ADVNMT_OUT_DIR)");
  cmd->add_option("--seed", opts.seed, "override the run seed");
}

RunConfig resolve_config(const CommonOpts& opts, const std::string& default_subdir) {
  RunConfig cfg;
  try {
    if (!opts.config_path.empty()) cfg.load(opts.config_path);
    for (const std::string& kv : opts.overrides) cfg.set_kv(kv);
    if (opts.seed >= 0) cfg.seed = static_cast<std::uint64_t>(opts.seed);
    if (!opts.out_dir.empty()) {
      cfg.out_dir = opts.out_dir;
    } else if (cfg.out_dir.empty()) {
      const char* env = std::getenv("ADVNMT_OUT_DIR");
      cfg.out_dir = env ? (fs::path(env) / default_subdir).string() : (fs::path("runs") / default_subdir).string();
    }
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string(what) + " path not given");
  if (!fs::exists(path)) throw UsageError(std::string(what) + " not found: " + path);
}

ResolvedCorpus resolve_corpus_checked(const RunConfig& cfg) {
  if (cfg.task == "files") {
    require_file(cfg.train_src, "training corpus");
    require_file(cfg.train_tgt, "training corpus");
    if (!cfg.dev_src.empty()) {
      require_file(cfg.dev_src, "dev corpus");
      require_file(cfg.dev_tgt, "dev corpus");
    }
  }
  return resolve_corpus(cfg);
}

void prepare_run_dir(RunConfig& cfg, const ResolvedCorpus& corpus) {
  fs::create_directories(cfg.out_dir);
  cfg.save((fs::path(cfg.out_dir) / "config.resolved.cfg").string());
  corpus.src_vocab.save((fs::path(cfg.out_dir) / "src.vocab").string());
  corpus.tgt_vocab.save((fs::path(cfg.out_dir) / "tgt.vocab").string());
}

Generator load_generator_checked(const std::string& path, const RunConfig& cfg) {
  require_file(path, "generator checkpoint");
  Generator g = Generator::load(path);
  if (g.config().emb_dim != cfg.emb_dim)
    throw UsageError("embedding dim mismatch: config has " + std::to_string(cfg.emb_dim) + ", checkpoint has " +
                     std::to_string(g.config().emb_dim));
  if (g.config().hidden_dim != cfg.hidden_dim)
    throw UsageError("hidden dim mismatch: config has " + std::to_string(cfg.hidden_dim) + ", checkpoint has " +
                     std::to_string(g.config().hidden_dim));
  return g;
}

int cmd_pretrain_mle(const CommonOpts& opts) {
  RunConfig cfg = resolve_config(opts, "pretrain_mle");
  ResolvedCorpus corpus = resolve_corpus_checked(cfg);
  prepare_run_dir(cfg, corpus);
  Generator g(cfg.generator(corpus.src_vocab.size(), corpus.tgt_vocab.size()), cfg.seed);
  MetricsLog log((fs::path(cfg.out_dir) / "metrics.log").string());
  MleTrainResult res = pretrain_mle(g, corpus.train, corpus.dev, cfg.training(), &log);
  const std::string ckpt = (fs::path(cfg.out_dir) / "generator.ckpt").string();
  g.save(ckpt);
  if (res.aborted) {
    std::cerr << "training diverged; last good parameters written to " << ckpt << "\n";
    return 2;
  }
  std::printf("epochs_run = %d\n", res.epochs_run);
  std::printf("final_dev_nll = %.6f\n", res.final_dev_nll);
  std::printf("final_dev_perplexity = %.6f\n", std::exp(res.final_dev_nll));
  std::printf("checkpoint = %s\n", ckpt.c_str());
  return 0;
}

int cmd_pretrain_d(const CommonOpts& opts, const std::string& g_path) {
  RunConfig cfg = resolve_config(opts, "pretrain_d");
  ResolvedCorpus corpus = resolve_corpus_checked(cfg);
  Generator g = load_generator_checked(g_path, cfg);
  prepare_run_dir(cfg, corpus);
  Adversary d(cfg.adversary(), g, cfg.seed);
  MetricsLog log((fs::path(cfg.out_dir) / "metrics.log").string());
  DPretrainResult res = pretrain_discriminator(d, g, corpus.train, cfg.training(), &log);
  const std::string ckpt = (fs::path(cfg.out_dir) / "discriminator.ckpt").string();
  d.save(ckpt);
  if (res.degenerate_negatives)
    std::cerr << "warning: beam negatives equal the ground truth for every pair; positives and negatives coincide\n";
  std::printf("heldout_accuracy = %.6f\n", res.heldout_accuracy);
  std::printf("final_loss = %.6f\n", res.final_loss);
  std::printf("checkpoint = %s\n", ckpt.c_str());
  return 0;
}

int cmd_train_adv(const CommonOpts& opts, const std::string& g_path, const std::string& d_path, bool resume) {
  RunConfig cfg = resolve_config(opts, "train_adv");
  ResolvedCorpus corpus = resolve_corpus_checked(cfg);

  std::string gen_path = g_path, disc_path = d_path;
  int done_epochs = 0;
  if (resume) {
    for (int e = cfg.epochs; e >= 1; --e) {
      char gname[64], dname[64];
      std::snprintf(gname, sizeof(gname), "g_epoch%03d.ckpt", e);
      std::snprintf(dname, sizeof(dname), "d_epoch%03d.ckpt", e);
      const fs::path gp = fs::path(cfg.out_dir) / gname, dp = fs::path(cfg.out_dir) / dname;
      if (fs::exists(gp) && fs::exists(dp)) {
        gen_path = gp.string();
        disc_path = dp.string();
        done_epochs = e;
        break;
      }
    }
    if (done_epochs == 0) std::cerr << "no epoch checkpoints found under " << cfg.out_dir << "; starting fresh\n";
  }
  Generator g = load_generator_checked(gen_path, cfg);
  require_file(disc_path, "discriminator checkpoint");
  Adversary d = Adversary::load(disc_path, g);
  prepare_run_dir(cfg, corpus);

  TrainingConfig tc = cfg.training();
  if (done_epochs > 0) {
    // continues from the checkpointed state; the resumed schedule is not a
    // bit-exact replay of the uninterrupted run
    tc.epochs = cfg.epochs - done_epochs;
    tc.epoch_offset = done_epochs;
    tc.seed = cfg.seed + static_cast<std::uint64_t>(done_epochs);
    if (tc.epochs <= 0) {
      std::printf("nothing to do: %d epochs already completed\n", done_epochs);
      return 0;
    }
  }
  const double warm_bleu = corpus.dev.empty() ? MetricsRecord::nan_value()
                                              : eval_bleu(g, corpus.dev, cfg.eval_beam, cfg.max_len);
  MetricsLog log((fs::path(cfg.out_dir) / "metrics.log").string());
  AdvTrainResult res = adversarial_train(g, d, corpus.train, corpus.dev, tc, &log);
  g.save((fs::path(cfg.out_dir) / "generator.ckpt").string());
  d.save((fs::path(cfg.out_dir) / "discriminator.ckpt").string());
  if (res.aborted) {
    std::cerr << "training diverged; parameters rolled back to the last epoch checkpoint\n";
    return 2;
  }
  if (res.d_collapse_warned) std::cerr << "warning: discriminator accuracy stayed below 0.5 for a full epoch\n";
  std::printf("warm_start_dev_bleu = %.4f\n", warm_bleu);
  if (!res.dev_bleu.empty()) std::printf("final_dev_bleu = %.4f\n", res.dev_bleu.back());
  return 0;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

int cmd_translate(const std::string& g_path, const std::string& input, const std::string& output,
                  std::string src_vocab_path, std::string tgt_vocab_path, int beam, int max_len, bool replace_unk,
                  int threads) {
  require_file(g_path, "generator checkpoint");
  require_file(input, "input file");
  if (beam < 1) throw UsageError("beam must be >= 1");
  if (threads < 1) throw UsageError("threads must be >= 1");
  const fs::path ckpt_dir = fs::path(g_path).parent_path();
  if (src_vocab_path.empty()) src_vocab_path = (ckpt_dir / "src.vocab").string();
  if (tgt_vocab_path.empty()) tgt_vocab_path = (ckpt_dir / "tgt.vocab").string();
  require_file(src_vocab_path, "source vocabulary");
  require_file(tgt_vocab_path, "target vocabulary");

  Generator g = Generator::load(g_path);
  Vocabulary src_vocab = Vocabulary::load(src_vocab_path);
  Vocabulary tgt_vocab = Vocabulary::load(tgt_vocab_path);
  if (src_vocab.size() != g.config().src_vocab || tgt_vocab.size() != g.config().tgt_vocab)
    throw UsageError("vocabulary sizes (" + std::to_string(src_vocab.size()) + ", " + std::to_string(tgt_vocab.size()) +
                     ") do not match the checkpoint (" + std::to_string(g.config().src_vocab) + ", " +
                     std::to_string(g.config().tgt_vocab) + ")");

  const std::vector<std::string> lines = read_lines(input);
  std::vector<std::string> results(lines.size());
  auto translate_range = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const std::vector<std::string> tokens = split_whitespace(lines[i]);
      if (tokens.empty()) {
        results[i].clear();
        continue;
      }
      const std::vector<int> src = src_vocab.encode(tokens);  // OOV becomes UNK, never an error
      DecodeResult hyp = beam_decode(g, src, beam, max_len);
      std::vector<std::string> out_tokens = tgt_vocab.decode(hyp.tokens);
      if (replace_unk) out_tokens = unk_replace(out_tokens, hyp.attention, tokens, tgt_vocab.token(Vocabulary::kUnk));
      results[i] = join_tokens(out_tokens);
    }
  };
  if (threads == 1 || lines.size() < 2) {
    translate_range(0, lines.size());
  } else {
    const std::size_t n = static_cast<std::size_t>(threads);
    std::vector<std::thread> pool;
    const std::size_t chunk = (lines.size() + n - 1) / n;
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t begin = t * chunk;
      const std::size_t end = std::min(begin + chunk, lines.size());
      if (begin >= end) break;
      pool.emplace_back(translate_range, begin, end);
    }
    for (std::thread& th : pool) th.join();
  }
  std::ofstream out(output, std::ios::trunc);
  if (!out) throw UsageError("cannot write " + output);
  for (const std::string& r : results) out << r << '\n';
  return 0;
}

int cmd_evaluate(const std::string& hyp_path, const std::string& ref_path, bool smooth) {
  require_file(hyp_path, "hypothesis file");
  require_file(ref_path, "reference file");
  std::vector<std::vector<std::string>> hyps, refs;
  for (const std::string& line : read_lines(hyp_path)) hyps.push_back(split_whitespace(line));
  for (const std::string& line : read_lines(ref_path)) refs.push_back(split_whitespace(line));
  if (hyps.size() != refs.size())
    throw UsageError("line counts differ: " + std::to_string(hyps.size()) + " hypotheses vs " +
                     std::to_string(refs.size()) + " references");
  BleuReport rep = corpus_bleu(hyps, refs, 4, smooth);
  std::printf("BLEU = %.2f\n", rep.bleu);
  for (int n = 0; n < 4; ++n) std::printf("precision_%d = %.6f\n", n + 1, rep.precisions[static_cast<std::size_t>(n)]);
  std::printf("brevity_penalty = %.6f\n", rep.brevity_penalty);
  std::printf("hyp_len = %zu\n", rep.hyp_len);
  std::printf("ref_len = %zu\n", rep.ref_len);
  return 0;
}

int cmd_grad_check(std::uint64_t seed, bool corrupt) {
  const double tol = 1e-4;
  const double corruption = corrupt ? 0.05 : 0.0;
  struct Suite {
    const char* name;
    GradCheckReport report;
  };
  std::vector<Suite> suites = {
      {"sequence_log_prob", gradcheck::check_sequence_log_prob(seed, corruption)},
      {"adversary_loss", gradcheck::check_adversary_loss(seed, corruption)},
      {"reinforce_surrogate", gradcheck::check_reinforce_surrogate(seed, corruption)},
  };
  bool ok = true;
  for (const Suite& s : suites) {
    std::printf("suite %s: max_rel_error = %.3e\n", s.name, s.report.max_rel_error);
    for (const GradCheckGroup& g : s.report.groups)
      std::printf("  %-24s %.3e\n", g.name.c_str(), g.max_rel_error);
    ok = ok && s.report.pass(tol);
  }
  std::printf("%s (tolerance %.0e)\n", ok ? "PASS" : "FAIL", tol);
  return ok ? 0 : 2;
}

int cmd_case_report(const CommonOpts& opts, const std::string& g_path, const std::string& d_path,
                    const std::string& output) {
  RunConfig cfg = resolve_config(opts, "case_report");
  ResolvedCorpus corpus = resolve_corpus_checked(cfg);
  Generator g = load_generator_checked(g_path, cfg);
  require_file(d_path, "discriminator checkpoint");
  Adversary d = Adversary::load(d_path, g);
  const std::vector<SentencePair>& pairs = corpus.dev.empty() ? corpus.train : corpus.dev;
  std::vector<CaseRow> rows = case_report(g, d, pairs, corpus.src_vocab, corpus.tgt_vocab, cfg.eval_beam, cfg.max_len);
  if (output.empty()) {
    write_case_report(std::cout, rows);
  } else {
    std::ofstream out(output, std::ios::trunc);
    if (!out) throw UsageError("cannot write " + output);
    write_case_report(out, rows);
  }
  return 0;
}

int cmd_gen_data(const CommonOpts& opts) {
  RunConfig cfg = resolve_config(opts, "data");
  if (cfg.task == "files") throw UsageError("gen-data requires a synthetic task (copy, reverse or shift)");
  ResolvedCorpus corpus = resolve_corpus_checked(cfg);
  fs::create_directories(cfg.out_dir);
  cfg.save((fs::path(cfg.out_dir) / "config.resolved.cfg").string());
  auto dump = [&](const std::vector<SentencePair>& pairs, const char* stem) {
    std::vector<std::vector<std::string>> src, tgt;
    for (const SentencePair& p : pairs) {
      src.push_back(corpus.src_vocab.decode(p.src));
      tgt.push_back(corpus.tgt_vocab.decode(p.tgt));
    }
    write_sentences((fs::path(cfg.out_dir) / (std::string(stem) + ".src")).string(), src);
    write_sentences((fs::path(cfg.out_dir) / (std::string(stem) + ".tgt")).string(), tgt);
  };
  dump(corpus.train, "train");
  dump(corpus.dev, "dev");
  corpus.src_vocab.save((fs::path(cfg.out_dir) / "src.vocab").string());
  corpus.tgt_vocab.save((fs::path(cfg.out_dir) / "tgt.vocab").string());
  std::printf("wrote %zu train and %zu dev pairs to %s\n", corpus.train.size(), corpus.dev.size(),
              cfg.out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adversarially trained sequence transduction at desk scale"};
  app.require_subcommand(1);

  CommonOpts mle_opts, d_opts, adv_opts, case_opts, data_opts;
  std::string g_path, d_path, input, output, hyp_path, ref_path, src_vocab_path, tgt_vocab_path;
  bool resume = false, replace_unk = false, smooth = false, corrupt = false;
  int beam = 4, max_len = 50, threads = 1;
  std::uint64_t gc_seed = 1;

  auto* mle = app.add_subcommand("pretrain-mle", "warm start the generator by maximum likelihood");
  add_common(mle, mle_opts);

  auto* pd = app.add_subcommand("pretrain-d", "pretrain the adversary on beam-search negatives");
  add_common(pd, d_opts);
  pd->add_option("--generator", g_path, "warm-started generator checkpoint")->required();

  auto* adv = app.add_subcommand("train-adv", "joint adversarial training of generator and adversary");
  add_common(adv, adv_opts);
  adv->add_option("--generator", g_path, "generator checkpoint")->required();
  adv->add_option("--discriminator", d_path, "adversary checkpoint")->required();
  adv->add_flag("--resume", resume, "resume from the latest epoch checkpoint in the output directory");

  auto* tr = app.add_subcommand("translate", "decode an input file line by line");
  tr->add_option("--generator", g_path, "generator checkpoint")->required();
  tr->add_option("--input", input, "source sentences, one per line")->required();
  tr->add_option("--output", output, "where to write translations")->required();
  tr->add_option("--src-vocab", src_vocab_path, "source vocabulary (default: next to the checkpoint)");
  tr->add_option("--tgt-vocab", tgt_vocab_path, "target vocabulary (default: next to the checkpoint)");
  tr->add_option("--beam", beam, "beam width");
  tr->add_option("--max-len", max_len, "decoding length cap");
  tr->add_flag("--unk-replace", replace_unk, "replace UNK outputs via the attention argmax");
  tr->add_option("--threads", threads, "sentence-level parallelism");

  auto* ev = app.add_subcommand("evaluate", "corpus BLEU of a hypothesis file against a reference file");
  ev->add_option("--hyp", hyp_path, "hypothesis file")->required();
  ev->add_option("--ref", ref_path, "reference file")->required();
  ev->add_flag("--smooth", smooth, "diagnostic smoothed variant");

  auto* gc = app.add_subcommand("grad-check", "finite-difference validation of all gradient paths");
  gc->add_option("--seed", gc_seed, "model seed");
  gc->add_flag("--corrupt", corrupt, "negative control: perturb one gradient and expect failure");

  auto* cr = app.add_subcommand("case-report", "per-sentence table of D scores and sentence BLEU");
  add_common(cr, case_opts);
  cr->add_option("--generator", g_path, "generator checkpoint")->required();
  cr->add_option("--discriminator", d_path, "adversary checkpoint")->required();
  cr->add_option("--output", output, "output file (default: stdout)");

  auto* gd = app.add_subcommand("gen-data", "write a synthetic task corpus as bitext files");
  add_common(gd, data_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 1;
  }

  try {
    if (mle->parsed()) return cmd_pretrain_mle(mle_opts);
    if (pd->parsed()) return cmd_pretrain_d(d_opts, g_path);
    if (adv->parsed()) return cmd_train_adv(adv_opts, g_path, d_path, resume);
    if (tr->parsed()) return cmd_translate(g_path, input, output, src_vocab_path, tgt_vocab_path, beam, max_len,
                                           replace_unk, threads);
    if (ev->parsed()) return cmd_evaluate(hyp_path, ref_path, smooth);
    if (gc->parsed()) return cmd_grad_check(gc_seed, corrupt);
    if (cr->parsed()) return cmd_case_report(case_opts, g_path, d_path, output);
    if (gd->parsed()) return cmd_gen_data(data_opts);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
