#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "raglab/eval.hpp"
#include "raglab/trainers.hpp"

namespace raglab {

/// Shared command options; each subcommand validates the subset it uses.
/// Outputs are written atomically (write-then-rename) and every run can be
/// reconstructed from the manifest its checkpoint carries.
struct RunConfig {
  TrainConfig train;

  // data generation
  int num_passages = 64;
  int vocab_size = 128;
  int n_train = 256;
  int n_dev = 64;
  int n_test = 64;

  // model
  int embed_dim = 16;

  // paths
  std::string kb_path;
  std::string train_path;
  std::string dev_path;
  std::string test_path;
  std::string dataset_path;  // eval / diagnose target
  std::string checkpoint_dir;
  std::string init_checkpoint;  // optional warm start
  std::string out_dir;

  // eval
  int eval_k = 10;
  DecodeMode decode_mode = DecodeMode::topk_product;
  int max_decode_len = 0;

  // diagnose
  int replicates = 1000;
  int example_index = 0;
  std::vector<Estimator> estimators = {Estimator::jsa, Estimator::tkm, Estimator::vrag};
};

int cmd_gen_data(const RunConfig& cfg);
int cmd_train(const RunConfig& cfg);
int cmd_eval(const RunConfig& cfg);
int cmd_diagnose(const RunConfig& cfg);
int cmd_posttrain_concat(const RunConfig& cfg);
int cmd_timing(const RunConfig& cfg);

}  // namespace raglab
