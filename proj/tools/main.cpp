#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "raglab/cli.hpp"

namespace {

using raglab::DecodeMode;
using raglab::Estimator;
using raglab::RunConfig;

void add_seed_flag(CLI::App* cmd, RunConfig& cfg) {
  cmd->add_option("--seed", cfg.train.seed, "run seed; every output is a pure function of it");
}

void add_train_flags(CLI::App* cmd, RunConfig& cfg, std::string& estimator) {
  cmd->add_option("--estimator", estimator, "jsa | tkm | vrag | reinforce | exact-em")
      ->check(CLI::IsMember({"jsa", "tkm", "vrag", "reinforce", "exact-em"}));
  cmd->add_option("--k", cfg.train.k, "top-k for both retrievers");
  cmd->add_option("--m", cfg.train.m, "MIS steps per example");
  cmd->add_option("--steps", cfg.train.steps, "training steps");
  cmd->add_option("--lr-retriever", cfg.train.lr_retriever, "learning rate for the query encoders");
  cmd->add_option("--lr-passage", cfg.train.lr_passage,
                  "learning rate for the shared passage encoder (defaults to --lr-retriever)");
  cmd->add_option("--lr-generator", cfg.train.lr_generator, "learning rate for the generator");
  cmd->add_option("--rebuild-every", cfg.train.rebuild_every,
                  "rebuild the passage index every N steps (0 = never)");
  cmd->add_option("--freeze-passage-encoder", cfg.train.freeze_passage_encoder,
                  "true|false; must be false when rebuilding");
  cmd->add_option("--beam-width", cfg.train.beam_width, "beam width for decoding");
  cmd->add_option("--grad-report-every", cfg.train.grad_report_every, "gradient report interval");
  cmd->add_option("--embed-dim", cfg.embed_dim, "embedding dimension for fresh models");
  add_seed_flag(cmd, cfg);
}

std::vector<Estimator> parse_estimators(const std::string& csv) {
  std::vector<Estimator> out;
  size_t start = 0;
  while (start <= csv.size()) {
    const size_t comma = csv.find(',', start);
    const std::string item = csv.substr(start, comma == std::string::npos ? csv.size() - start : comma - start);
    if (!item.empty()) out.push_back(raglab::estimator_from_name(item));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.empty()) throw std::invalid_argument("no estimators given");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale end-to-end training lab for retrieve-then-generate models"};
  app.require_subcommand(1);
  // flags may come from a config file with one [subcommand] section each;
  // command-line values override file values
  app.set_config("--config", "", "read flags from an ini file (sections per subcommand)");

  RunConfig cfg;
  std::string estimator = "jsa";
  std::string decode_mode = "topk";
  std::string estimators_csv = "jsa,tkm,vrag";

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic task (kb + train/dev/test)");
  gen->add_option("--num-passages", cfg.num_passages, "knowledge base size");
  gen->add_option("--vocab-size", cfg.vocab_size, "shared vocabulary size");
  gen->add_option("--n-train", cfg.n_train, "train split size");
  gen->add_option("--n-dev", cfg.n_dev, "dev split size");
  gen->add_option("--n-test", cfg.n_test, "test split size");
  gen->add_option("--out-dir", cfg.out_dir, "output directory")->required();
  add_seed_flag(gen, cfg);

  CLI::App* train = app.add_subcommand("train", "train with a chosen estimator");
  train->add_option("--kb", cfg.kb_path, "knowledge base file")->required();
  train->add_option("--train-data", cfg.train_path, "training split file")->required();
  train->add_option("--checkpoint-dir", cfg.checkpoint_dir, "output checkpoint directory")->required();
  train->add_option("--init-checkpoint", cfg.init_checkpoint, "warm-start checkpoint directory");
  add_train_flags(train, cfg, estimator);

  CLI::App* eval = app.add_subcommand("eval", "retrieval and generation metrics for a checkpoint");
  eval->add_option("--kb", cfg.kb_path)->required();
  eval->add_option("--data", cfg.dataset_path)->required();
  eval->add_option("--checkpoint", cfg.init_checkpoint)->required();
  eval->add_option("--out-dir", cfg.out_dir)->required();
  eval->add_option("--k", cfg.eval_k, "top-k documents decoding width");
  eval->add_option("--beam-width", cfg.train.beam_width);
  eval->add_option("--decode-mode", decode_mode, "topk | concat")
      ->check(CLI::IsMember({"topk", "concat"}));
  eval->add_option("--max-decode-len", cfg.max_decode_len, "0 = longest reference");

  CLI::App* diag = app.add_subcommand("diagnose", "replicate bias/variance of estimator gradients");
  diag->add_option("--kb", cfg.kb_path)->required();
  diag->add_option("--data", cfg.dataset_path)->required();
  diag->add_option("--checkpoint", cfg.init_checkpoint)->required();
  diag->add_option("--out-dir", cfg.out_dir)->required();
  diag->add_option("--replicates", cfg.replicates);
  diag->add_option("--example", cfg.example_index, "example index inside --data");
  diag->add_option("--estimators", estimators_csv, "comma-separated estimator list");
  diag->add_option("--k", cfg.train.k);
  diag->add_option("--m", cfg.train.m);
  add_seed_flag(diag, cfg);

  CLI::App* post = app.add_subcommand("posttrain-concat", "post-train the generator on concatenated top-k");
  post->add_option("--kb", cfg.kb_path)->required();
  post->add_option("--train-data", cfg.train_path)->required();
  post->add_option("--checkpoint", cfg.init_checkpoint, "starting checkpoint")->required();
  post->add_option("--checkpoint-dir", cfg.checkpoint_dir, "output checkpoint directory")->required();
  post->add_option("--k", cfg.train.k);
  post->add_option("--steps", cfg.train.steps);
  post->add_option("--lr-generator", cfg.train.lr_generator);
  add_seed_flag(post, cfg);

  CLI::App* timing = app.add_subcommand("timing", "seconds per 10 iterations per estimator");
  timing->add_option("--kb", cfg.kb_path)->required();
  timing->add_option("--train-data", cfg.train_path)->required();
  timing->add_option("--out-dir", cfg.out_dir)->required();
  timing->add_option("--estimators", estimators_csv);
  timing->add_option("--k", cfg.train.k);
  timing->add_option("--m", cfg.train.m);
  timing->add_option("--embed-dim", cfg.embed_dim);
  add_seed_flag(timing, cfg);

  CLI11_PARSE(app, argc, argv);

  try {
    cfg.train.estimator = raglab::estimator_from_name(estimator);
    cfg.decode_mode = decode_mode == "concat" ? DecodeMode::concat : DecodeMode::topk_product;
    cfg.estimators = parse_estimators(estimators_csv);

    if (gen->parsed()) return raglab::cmd_gen_data(cfg);
    if (train->parsed()) return raglab::cmd_train(cfg);
    if (eval->parsed()) return raglab::cmd_eval(cfg);
    if (diag->parsed()) return raglab::cmd_diagnose(cfg);
    if (post->parsed()) return raglab::cmd_posttrain_concat(cfg);
    if (timing->parsed()) return raglab::cmd_timing(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "error: no subcommand\n";
  return 1;
}
