#include "bisenet/analysis.hpp"

#include <cstdio>
#include <map>
#include <ostream>

#include "bisenet/text_util.hpp"

namespace bisenet::analysis {

std::string to_string(Convention c) {
  return c == Convention::MACs ? "macs" : "flops";
}

Convention convention_from_string(const std::string& s) {
  if (s == "macs") return Convention::MACs;
  if (s == "flops") return Convention::FLOPs;
  throw ConfigError("unknown convention '" + s + "' (expected macs or flops)");
}

namespace {

bool is_main_head(const LayerNode& n) { return n.name.rfind("head.main", 0) == 0; }

// Elementwise work per output element under the FLOPs convention.
std::uint64_t elementwise_per_output(const LayerNode& n) {
  switch (n.kind) {
    case LayerKind::BatchNorm:
      return 2;  // scale and shift
    case LayerKind::ReLU:
    case LayerKind::Add:
    case LayerKind::Mul:
      return 1;
    case LayerKind::Sigmoid:
      return 4;
    case LayerKind::MaxPool:
    case LayerKind::AvgPool:
      return static_cast<std::uint64_t>(n.kernel) * n.kernel;
    case LayerKind::Upsample:
      return 7;  // four products, three sums
    default:
      return 0;
  }
}

}  // namespace

CostReport count_costs(const Graph& g, int input_h, int input_w,
                       const CostOptions& opt) {
  CostReport r;
  r.convention = opt.convention;
  r.input_h = input_h;
  r.input_w = input_w;
  r.include_head = opt.include_head;
  if (g.nodes().empty()) return r;

  const auto shapes =
      g.infer_shapes(Shape{opt.batch, g.in_channels(), input_h, input_w});
  std::map<std::string, std::uint64_t> param_sizes;
  for (const auto& p : g.params()) param_sizes[p.name] = p.shape.numel();

  std::vector<bool> live(g.nodes().size(), false);
  if (g.main_output()) {
    live = g.ancestors({*g.main_output()});
  } else {
    std::fill(live.begin(), live.end(), true);
  }

  for (const LayerNode& n : g.nodes()) {
    if (!live[n.id] || n.kind == LayerKind::Input) continue;
    if (!opt.include_head && is_main_head(n)) continue;
    LayerCost c;
    c.name = n.name;
    c.kind = std::string(bisenet::to_string(n.kind));
    const Shape& out = shapes[n.id];
    const std::uint64_t out_elems = out.numel();
    std::uint64_t elementwise = out_elems * elementwise_per_output(n);
    if (n.kind == LayerKind::Conv) {
      const Shape& in = shapes[n.inputs[0]];
      c.macs = static_cast<std::uint64_t>(n.kernel) * n.kernel *
               (in.c / n.groups) * out_elems;
      if (!n.bias.empty()) elementwise += out_elems;
    } else if (n.kind == LayerKind::GlobalAvgPool) {
      elementwise = shapes[n.inputs[0]].numel();
    }
    for (const std::string* p : {&n.weight, &n.bias, &n.gamma, &n.beta})
      if (!p->empty()) c.params += param_sizes.at(*p);
    c.flops = opt.convention == Convention::MACs ? c.macs : 2 * c.macs + elementwise;
    c.act_bytes = out_elems * static_cast<std::uint64_t>(opt.bytes_per_element);

    r.totals.macs += c.macs;
    r.totals.flops += c.flops;
    r.totals.params += c.params;
    r.totals.act_bytes += c.act_bytes;
    r.per_layer.push_back(std::move(c));
  }
  r.totals.name = "total";
  return r;
}

std::uint64_t count_params(const Graph& g) {
  std::uint64_t total = 0;
  for (const auto& p : g.params()) total += p.shape.numel();
  return total;
}

TableRow single_row(const ArchConfig& cfg, const std::string& label,
                    int input_h, int input_w, Convention convention) {
  ArchConfig c = cfg;
  c.boosters.clear();
  c.input_h = input_h;
  c.input_w = input_w;
  const Graph g = build_graph(c);
  TableRow row;
  row.label = label;
  row.cfg = c;
  CostOptions opt;
  opt.convention = convention;
  row.gflops_model = count_costs(g, input_h, input_w, opt).totals.flops / 1e9;
  opt.include_head = false;
  row.gflops_model_no_head = count_costs(g, input_h, input_w, opt).totals.flops / 1e9;
  row.params = count_params(g);
  return row;
}

std::vector<TableRow> reproduce_tables(const ArchConfig& base, int input_h,
                                       int input_w, Convention convention) {
  std::vector<TableRow> rows;
  auto push = [&](const std::string& table, const std::string& label,
                  const ArchConfig& cfg, double paper) {
    TableRow row = single_row(cfg, label, input_h, input_w, convention);
    row.table = table;
    row.gflops_paper = paper;
    rows.push_back(std::move(row));
  };

  const std::pair<Aggregation, double> aggs[] = {
      {Aggregation::DetailOnly, 15.26}, {Aggregation::SemanticOnly, 7.63},
      {Aggregation::Sum, 20.77},        {Aggregation::Concat, 21.98},
      {Aggregation::BGA, 21.15}};
  for (const auto& [agg, paper] : aggs) {
    ArchConfig c = base;
    c.aggregation = agg;
    push("2", "agg=" + bisenet::to_string(agg), c, paper);
  }

  const std::pair<const char*, double> lambdas[] = {
      {"1/2", 25.84}, {"1/4", 21.15}, {"1/8", 19.93}, {"1/16", 19.61}};
  for (const auto& [lambda, paper] : lambdas) {
    ArchConfig c = base;
    c.lambda = text::parse_double(lambda);
    push("3a", std::string("lambda=") + lambda, c, paper);
  }

  {
    ArchConfig c = base;
    push("3b", "ge=full", c, 21.15);
    c = base;
    c.context_embedding = false;
    push("3b", "ge=no_context", c, 21.07);
    c = base;
    c.ge_double_dw = false;
    push("3b", "ge=single_5x5_dw", c, 21.15);
    c = base;
    c.ge_gather_kernel = 1;
    push("3b", "ge=gather_1x1", c, 15.78);
  }

  const std::pair<int, double> eps[] = {
      {1, 17.78}, {2, 18.45}, {4, 19.8}, {6, 21.15}, {8, 22.49}};
  for (const auto& [e, paper] : eps) {
    ArchConfig c = base;
    c.expansion = e;
    push("3c", "expansion=" + std::to_string(e), c, paper);
  }

  const std::pair<double, double> alphas[] = {
      {1.0, 21.15}, {1.25, 34.98}, {1.5, 49.46}, {1.75, 66.45}, {2.0, 85.94}};
  for (const auto& [a, paper] : alphas) {
    ArchConfig c = base;
    c.alpha = a;
    push("4a", "alpha=" + text::format_double(a), c, paper);
  }

  const std::pair<int, double> depths[] = {
      {1, 21.15}, {2, 25.26}, {3, 29.38}, {4, 33.5}};
  for (const auto& [d, paper] : depths) {
    ArchConfig c = base;
    c.depth = d;
    push("4b", "depth=" + std::to_string(d), c, paper);
  }
  return rows;
}

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string pad_right(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

std::string pad_left(const std::string& s, std::size_t width) {
  return s.size() < width ? std::string(width - s.size(), ' ') + s : s;
}

std::string convention_note(Convention c) {
  return c == Convention::MACs
             ? "convolution multiply-accumulates only"
             : "2 x convolution MACs + elementwise ops (bias, BN, activations, "
               "pooling, resampling, add/mul)";
}

}  // namespace

void write_report_text(std::ostream& os, const CostReport& r) {
  os << "input " << r.input_h << "x" << r.input_w << ", convention "
     << to_string(r.convention) << " (" << convention_note(r.convention)
     << "), main head " << (r.include_head ? "included" : "excluded") << "\n";
  std::size_t width = 5;
  for (const auto& c : r.per_layer) width = std::max(width, c.name.size());
  os << pad_right("layer", width) << "  " << pad_right("kind", 9)
     << pad_left("macs", 14) << pad_left("flops", 14) << pad_left("params", 10)
     << pad_left("act_bytes", 12) << "\n";
  auto line = [&](const LayerCost& c) {
    os << pad_right(c.name, width) << "  " << pad_right(c.kind, 9)
       << pad_left(std::to_string(c.macs), 14)
       << pad_left(std::to_string(c.flops), 14)
       << pad_left(std::to_string(c.params), 10)
       << pad_left(std::to_string(c.act_bytes), 12) << "\n";
  };
  for (const auto& c : r.per_layer) line(c);
  line(r.totals);
  os << "G" << to_string(r.convention) << ": " << fixed(r.totals.flops / 1e9, 4)
     << "\n";
}

void write_report_csv(std::ostream& os, const CostReport& r) {
  os << "name,kind,macs,flops,params,act_bytes\n";
  for (const auto& c : r.per_layer) {
    os << c.name << ',' << c.kind << ',' << c.macs << ',' << c.flops << ','
       << c.params << ',' << c.act_bytes << '\n';
  }
  os << "total,," << r.totals.macs << ',' << r.totals.flops << ','
     << r.totals.params << ',' << r.totals.act_bytes << '\n';
}

void write_table_text(std::ostream& os, const std::vector<TableRow>& rows,
                      Convention convention, int input_h, int input_w) {
  os << "input " << input_h << "x" << input_w << ", convention "
     << to_string(convention) << " (" << convention_note(convention) << ")\n"
     << "Published GFLOPs are listed for comparison only; their counting "
        "convention is not stated.\n";
  os << pad_right("table", 6) << pad_right("config", 22) << pad_left("model", 10)
     << pad_left("no_head", 10) << pad_left("paper", 10)
     << pad_left("model/paper", 13) << pad_left("params", 12) << "\n";
  for (const auto& r : rows) {
    os << pad_right(r.table, 6) << pad_right(r.label, 22)
       << pad_left(fixed(r.gflops_model, 2), 10)
       << pad_left(fixed(r.gflops_model_no_head, 2), 10)
       << pad_left(r.gflops_paper ? fixed(*r.gflops_paper, 2) : "-", 10)
       << pad_left(r.gflops_paper ? fixed(r.gflops_model / *r.gflops_paper, 3) : "-", 13)
       << pad_left(std::to_string(r.params), 12) << "\n";
  }
}

void write_table_csv(std::ostream& os, const std::vector<TableRow>& rows) {
  os << "config,gflops_model,gflops_paper,params\n";
  for (const auto& r : rows) {
    const std::string name = r.table.empty() ? r.label : r.table + ":" + r.label;
    os << name << ',' << fixed(r.gflops_model, 4) << ','
       << (r.gflops_paper ? fixed(*r.gflops_paper, 2) : "") << ',' << r.params
       << '\n';
  }
}

}  // namespace bisenet::analysis
