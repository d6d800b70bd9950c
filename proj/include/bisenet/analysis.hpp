#pragma once

// Static cost model over a layer graph: multiply-accumulates, FLOPs,
// parameters and activation footprint per node.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "bisenet/graph.hpp"
#include "bisenet/model.hpp"

namespace bisenet::analysis {

/// MACs: flops = conv multiply-accumulates only.
/// FLOPs: flops = 2 * conv MACs + elementwise work (bias, BN, activations,
/// pooling, resampling, add/mul).
enum class Convention { MACs, FLOPs };

std::string to_string(Convention c);
Convention convention_from_string(const std::string& s);

struct LayerCost {
  std::string name;
  std::string kind;
  std::uint64_t macs = 0;
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
  std::uint64_t act_bytes = 0;  // output tensor, counted once per node
};

struct CostReport {
  std::vector<LayerCost> per_layer;
  LayerCost totals;
  Convention convention = Convention::FLOPs;
  int input_h = 0;
  int input_w = 0;
  bool include_head = true;
};

struct CostOptions {
  Convention convention = Convention::FLOPs;
  /// Count the main segmentation head ("head.main.*" nodes).
  bool include_head = true;
  int batch = 1;
  int bytes_per_element = 4;
};

/// Costs of every node the main output depends on (booster heads are never
/// counted). Throws ConfigError when shapes cannot be resolved at (h, w).
CostReport count_costs(const Graph& g, int input_h, int input_w,
                       const CostOptions& opt = {});

/// Elements over the whole parameter registry.
std::uint64_t count_params(const Graph& g);

struct TableRow {
  std::string table;   // "2", "3a", ...
  std::string label;   // e.g. "lambda=1/4"
  ArchConfig cfg;
  double gflops_model = 0;          // with the main head
  double gflops_model_no_head = 0;  // trunk + aggregation only
  std::optional<double> gflops_paper;
  std::uint64_t params = 0;
};

/// Ablation grid in the published ordering, each row costed at (h, w).
std::vector<TableRow> reproduce_tables(const ArchConfig& base, int input_h,
                                       int input_w, Convention convention);

/// One row for `cfg` alone.
TableRow single_row(const ArchConfig& cfg, const std::string& label,
                    int input_h, int input_w, Convention convention);

void write_report_text(std::ostream& os, const CostReport& r);
/// name,kind,macs,flops,params,act_bytes
void write_report_csv(std::ostream& os, const CostReport& r);
void write_table_text(std::ostream& os, const std::vector<TableRow>& rows,
                      Convention convention, int input_h, int input_w);
/// config,gflops_model,gflops_paper,params
void write_table_csv(std::ostream& os, const std::vector<TableRow>& rows);

}  // namespace bisenet::analysis
