// SPDX-License-Identifier: Apache-2.0
//
// File formats: measurement CSV, JSON bundles, sparsity specs, run configs
// and fitted planner models. Every JSON document carries "format_version".
// docs/formats.md describes each layout with examples.
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "prumux/distiller.hpp"
#include "prumux/encoder.hpp"
#include "prumux/muxer.hpp"
#include "prumux/planner.hpp"
#include "prumux/pruner.hpp"
#include "prumux/sparsity.hpp"
#include "prumux/toytrain.hpp"

namespace prumux {

inline constexpr int kFormatVersion = 1;

/// Shortest decimal text that parses back to the same double.
std::string format_number(double v);

/// Strict decimal parse of the whole field; throws kParse.
double parse_number(std::string_view text);

// Measurements -------------------------------------------------------------

inline constexpr std::string_view kMeasurementHeader = "task,n,sparsity,accuracy,throughput";

/// Errors name the offending line (the header is line 1) and use kParse.
std::vector<MeasurementRecord> parse_measurements(std::string_view text);
std::string measurements_to_csv(const std::vector<MeasurementRecord>& records);

std::vector<MeasurementRecord> load_measurements(const std::string& path);
void save_measurements(const std::string& path, const std::vector<MeasurementRecord>& records);

// Run configuration ---------------------------------------------------------

/// Everything needed to regenerate a synthetic task and continue training.
struct RunConfig {
  RngKey seed{7};
  TaskOptions task;
  EncoderConfig encoder;
  KitOptions kit;
  TrainConfig train;
  LossWeights distill;
  double prune_sparsity = 0.5;  // target for --phase prune without an explicit spec
};

RunConfig parse_run_config(std::string_view json_text);
std::string run_config_to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::string& path);

// Bundles -------------------------------------------------------------------

struct PhaseRecord {
  std::string phase;
  std::size_t epochs = 0;
  double final_loss = 0.0;
  double final_accuracy = 0.0;
};

struct ModelBundle {
  EncoderModel model;
  MuxKit kit;
  /// Spec against the dense shape the model was compacted from; absent when dense.
  std::optional<SparsitySpec> spec;
  RunConfig config;
  std::vector<PhaseRecord> history;
};

/// Throws kShape when model, kit and spec disagree.
void validate(const ModelBundle& bundle);

std::string bundle_to_json(const ModelBundle& bundle);
ModelBundle parse_bundle(std::string_view json_text);
/// Writes to a temporary file and renames it into place.
void save_bundle(const std::string& path, const ModelBundle& bundle);
ModelBundle load_bundle(const std::string& path);

// Sparsity specs --------------------------------------------------------------

/// A spec file holds one of: explicit masks ("spec"), mask scores plus a
/// threshold ("scores"), or a target sparsity ("target_sparsity").
SparsitySpec parse_spec_request(std::string_view json_text, const ModelShape& dense_shape);
std::string spec_to_json(const SparsitySpec& spec);
SparsitySpec load_spec_request(const std::string& path, const ModelShape& dense_shape);

// Planner models ------------------------------------------------------------

std::string planner_to_json(const PlannerModel& model);
PlannerModel parse_planner(std::string_view json_text);
void save_planner(const std::string& path, const PlannerModel& model);
PlannerModel load_planner(const std::string& path);

// Files ----------------------------------------------------------------------

std::string read_file(const std::string& path);
/// Atomic replace via a temporary sibling file.
void write_file(const std::string& path, std::string_view content);

}  // namespace prumux
