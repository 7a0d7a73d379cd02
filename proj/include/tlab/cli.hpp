#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "tlab/config.hpp"
#include "tlab/train.hpp"

namespace tlab {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumerical = 4,
};

// Runs one tlab command line and returns its exit code. Errors are reported
// on `err`; nothing escapes as an exception.
int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err);

struct PreparedData {
  Vocab src_vocab;
  Vocab tgt_vocab;
  ExperimentData data;
};

// Seeded hold-out of round(fraction * n) pairs (at least one) for validation.
void split_holdout(const std::vector<SentencePair>& pairs, double fraction, std::uint64_t seed,
                   std::vector<SentencePair>& train, std::vector<SentencePair>& val);

// Learns both vocabularies from the training pairs (vocab_size tokens each)
// and tokenizes both splits.
PreparedData prepare_data(const std::vector<SentencePair>& train,
                          const std::vector<SentencePair>& val, std::size_t vocab_size);

// Line chart of mean train (dashed) and validation (solid) loss per epoch
// for each variant, epoch axis starting at 1.
std::string render_loss_svg(std::span<const EpochMetrics> rows);

// Rows sorted by variant, trial and epoch under the standard metrics header.
std::vector<EpochMetrics> merge_metrics(std::span<const std::filesystem::path> paths);

}  // namespace tlab
