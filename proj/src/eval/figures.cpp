#include "chunkflow/eval/figures.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "chunkflow/core/errors.hpp"
#include "chunkflow/eval/statistics.hpp"
#include "chunkflow/scaling/scaling.hpp"

namespace chunkflow {
namespace {

namespace fs = std::filesystem;

std::string join(const std::vector<std::string>& parts, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw FormatError("CSV has no column '" + name + "'");
    return std::size_t(it - header.begin());
  }
  double num(std::size_t row, const std::string& name) const { return std::stod(rows[row][col(name)]); }
  const std::string& str(std::size_t row, const std::string& name) const { return rows[row][col(name)]; }
};

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string c; std::getline(ss, c, ',');) out.push_back(c);
  return out;
}

Table read_table(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot read " + path.string());
  Table t;
  std::string line;
  if (!std::getline(f, line)) throw FormatError(path.string() + ": empty file");
  t.header = split(line);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    t.rows.push_back(split(line));
    if (t.rows.back().size() != t.header.size()) throw FormatError(path.string() + ": ragged row '" + line + "'");
  }
  return t;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// Plotting: just enough SVG for line, band and bar panels.

struct Series {
  std::string label;
  std::vector<double> x, y;
  bool dashed = false;
  bool band = false;  // closed polygon, drawn translucent
  bool markers_only = false;
  int color = -1;  // palette index; -1 takes the next one
};

struct Panel {
  std::string xlabel, ylabel;
  bool logx = false, logy = false, bars = false;
  std::vector<Series> series;
};

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

struct Axis {
  double lo = 0, hi = 1;
  bool log = false;

  double map(double v) const {
    const double t = log ? std::log10(v) : v;
    return hi > lo ? (t - lo) / (hi - lo) : 0.5;
  }
  std::vector<double> ticks() const {
    std::vector<double> out;
    if (log) {
      for (double k = std::ceil(lo); k <= std::floor(hi); ++k) out.push_back(std::pow(10.0, k));
      if (out.empty()) out = {std::pow(10.0, lo), std::pow(10.0, hi)};
      return out;
    }
    const double raw = (hi - lo) / 5, mag = std::pow(10.0, std::floor(std::log10(raw)));
    const double step = raw / mag < 2 ? 2 * mag : raw / mag < 5 ? 5 * mag : 10 * mag;
    for (double v = std::ceil(lo / step) * step; v <= hi + 1e-12 * step; v += step) out.push_back(v);
    return out;
  }
};

Axis fit_axis(const std::vector<double>& values, bool log, bool from_zero) {
  Axis a;
  a.log = log;
  bool any = false;
  for (double v : values) {
    if (!std::isfinite(v) || (log && v <= 0)) continue;
    const double t = log ? std::log10(v) : v;
    a.lo = any ? std::min(a.lo, t) : t;
    a.hi = any ? std::max(a.hi, t) : t;
    any = true;
  }
  if (!any) return a;
  if (from_zero && !log) a.lo = std::min(a.lo, 0.0);
  const double pad = a.hi > a.lo ? 0.05 * (a.hi - a.lo) : (log ? 0.5 : std::max(1e-3, 0.1 * std::abs(a.hi)));
  a.lo -= pad, a.hi += pad;
  return a;
}

std::string tick_label(double v) {
  if (std::abs(v) < 1e-12) v = 0.0;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string render_svg(const std::string& title, const std::vector<Panel>& panels) {
  const double W = 420, H = 320, left = 70, right = 20, top = 40, bottom = 50;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << px(W * double(panels.size())) << "\" height=\"" << px(H)
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"10\" y=\"18\" font-size=\"13\">" << title << "</text>\n";
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const Panel& pn = panels[p];
    const double x0 = W * double(p) + left, x1 = W * double(p + 1) - right, y0 = H - bottom, y1 = top;
    std::vector<double> xs, ys;
    for (const Series& se : pn.series) {
      xs.insert(xs.end(), se.x.begin(), se.x.end());
      ys.insert(ys.end(), se.y.begin(), se.y.end());
    }
    Axis ax = pn.bars ? Axis{-0.5, double(pn.series.size()) - 0.5, false} : fit_axis(xs, pn.logx, false);
    const Axis ay = fit_axis(ys, pn.logy, pn.bars);
    auto X = [&](double v) { return x0 + (x1 - x0) * ax.map(v); };
    auto Y = [&](double v) { return y0 + (y1 - y0) * ay.map(v); };

    s << "<g>\n<rect x=\"" << px(x0) << "\" y=\"" << px(y1) << "\" width=\"" << px(x1 - x0) << "\" height=\"" << px(y0 - y1)
      << "\" fill=\"none\" stroke=\"black\"/>\n";
    if (!pn.bars)
      for (double t : ax.ticks())
        s << "<text x=\"" << px(X(t)) << "\" y=\"" << px(y0 + 14) << "\" text-anchor=\"middle\">" << tick_label(t)
          << "</text>\n";
    for (double t : ay.ticks())
      s << "<line x1=\"" << px(x0 - 4) << "\" y1=\"" << px(Y(t)) << "\" x2=\"" << px(x0) << "\" y2=\"" << px(Y(t))
        << "\" stroke=\"black\"/><text x=\"" << px(x0 - 6) << "\" y=\"" << px(Y(t) + 4) << "\" text-anchor=\"end\">"
        << tick_label(t) << "</text>\n";
    s << "<text x=\"" << px((x0 + x1) / 2) << "\" y=\"" << px(H - 14) << "\" text-anchor=\"middle\">" << pn.xlabel
      << "</text>\n";
    s << "<text transform=\"translate(" << px(W * double(p) + 16) << "," << px((y0 + y1) / 2)
      << ") rotate(-90)\" text-anchor=\"middle\">" << pn.ylabel << "</text>\n";

    std::size_t next = 0;
    std::vector<std::pair<std::string, const char*>> legend;
    for (std::size_t k = 0; k < pn.series.size(); ++k) {
      const Series& se = pn.series[k];
      const char* c = kPalette[(se.color >= 0 ? std::size_t(se.color) : next++) % 8];
      if (pn.bars) {
        const double bx = X(double(k)), h = se.y.empty() ? 0 : se.y[0];
        s << "<rect x=\"" << px(bx - 0.3 * (x1 - x0) / double(pn.series.size())) << "\" y=\"" << px(Y(h)) << "\" width=\""
          << px(0.6 * (x1 - x0) / double(pn.series.size())) << "\" height=\"" << px(Y(ay.log ? 1 : 0) - Y(h)) << "\" fill=\""
          << c << "\"/>\n<text x=\"" << px(bx) << "\" y=\"" << px(y0 + 14) << "\" text-anchor=\"middle\">" << se.label
          << "</text>\n";
        continue;
      }
      std::string pts;
      for (std::size_t i = 0; i < se.x.size(); ++i) {
        if (!std::isfinite(se.y[i]) || (pn.logy && se.y[i] <= 0) || (pn.logx && se.x[i] <= 0)) continue;
        pts += px(X(se.x[i])) + "," + px(Y(se.y[i])) + " ";
      }
      if (!pts.empty()) pts.pop_back();
      if (se.band) {
        s << "<polygon points=\"" << pts << "\" fill=\"" << c << "\" fill-opacity=\"0.2\" stroke=\"none\"/>\n";
      } else {
        if (!se.markers_only)
          s << "<polyline points=\"" << pts << "\" fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\""
            << (se.dashed ? " stroke-dasharray=\"4,3\"" : "") << "/>\n";
        if (se.x.size() <= 64 || se.markers_only)
          for (std::size_t i = 0; i < se.x.size(); ++i)
            if (std::isfinite(se.y[i]) && !(pn.logy && se.y[i] <= 0))
              s << "<circle cx=\"" << px(X(se.x[i])) << "\" cy=\"" << px(Y(se.y[i])) << "\" r=\"2.5\" fill=\"" << c
                << "\"/>\n";
      }
      legend.emplace_back(se.label, c);
    }
    if (!legend.empty()) {
      std::size_t widest = 0;
      for (const auto& [label, _] : legend) widest = std::max(widest, label.size());
      const double lw = 6.5 * double(widest) + 10, lh = 13 * double(legend.size()) + 6;
      s << "<rect x=\"" << px(x1 - lw - 4) << "\" y=\"" << px(y1 + 4) << "\" width=\"" << px(lw) << "\" height=\"" << px(lh)
        << "\" fill=\"white\" fill-opacity=\"0.85\" stroke=\"#cccccc\"/>\n";
      for (std::size_t k = 0; k < legend.size(); ++k)
        s << "<text x=\"" << px(x1 - 9) << "\" y=\"" << px(y1 + 17 + 13 * double(k)) << "\" text-anchor=\"end\" fill=\""
          << legend[k].second << "\">" << legend[k].first << "</text>\n";
    }
    s << "</g>\n";
  }
  s << "</svg>\n";
  return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  f << text;
}

struct Figure {
  std::string csv;
  std::string svg;
};

// Series keyed by a label column, in first-appearance order.
template <class F>
std::vector<Series> group_by(const Table& t, const std::string& key, F&& point) {
  std::vector<Series> out;
  std::map<std::string, std::size_t> index;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const std::string& k = t.str(r, key);
    if (!index.count(k)) {
      index[k] = out.size();
      out.push_back({k, {}, {}});
    }
    const auto [x, y] = point(r);
    out[index[k]].x.push_back(x);
    out[index[k]].y.push_back(y);
  }
  return out;
}

void sort_by_x(Series& s) {
  std::vector<std::size_t> idx(s.x.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s.x[a] < s.x[b]; });
  Series o = s;
  o.x.clear(), o.y.clear();
  for (std::size_t i : idx) o.x.push_back(s.x[i]), o.y.push_back(s.y[i]);
  s = o;
}

Figure tokenizer_pareto(const Table& t) {
  Figure f;
  f.csv = "tokenizer,budget,tokens_per_chunk,pos_mse,rot_geodesic_rad\n";
  for (std::size_t r = 0; r < t.rows.size(); ++r)
    f.csv += t.str(r, "tokenizer") + "," + t.str(r, "budget") + "," + fmt(t.num(r, "tokens_per_chunk")) + "," +
             fmt(t.num(r, "pos_mse")) + "," + fmt(t.num(r, "rot_geodesic_rad")) + "\n";
  Panel pos{"tokens per chunk", "position MSE (m^2)", true, true, false, {}};
  Panel rot{"tokens per chunk", "rotation error (rad)", true, true, false, {}};
  pos.series = group_by(t, "tokenizer", [&](std::size_t r) { return std::pair{t.num(r, "tokens_per_chunk"), t.num(r, "pos_mse")}; });
  rot.series =
      group_by(t, "tokenizer", [&](std::size_t r) { return std::pair{t.num(r, "tokens_per_chunk"), t.num(r, "rot_geodesic_rad")}; });
  // Several quantization scales share a coefficient count, so the DCT family is a scatter.
  for (Panel* p : {&pos, &rot})
    for (Series& s : p->series) {
      sort_by_x(s);
      s.markers_only = s.label == "dct_bpe";
    }
  f.svg = render_svg("Tokenizer reconstruction error vs token count", {pos, rot});
  return f;
}

Figure hybrid_training(const Table& t) {
  Figure f;
  f.csv = "arm,step,smoothed_loss\n";
  for (std::size_t r = 0; r < t.rows.size(); ++r)
    f.csv += t.str(r, "arm") + "," + t.str(r, "step") + "," + fmt(t.num(r, "smoothed_loss")) + "\n";
  Panel p{"flow step", "smoothed flow loss", false, false, false, {}};
  p.series = group_by(t, "arm", [&](std::size_t r) { return std::pair{t.num(r, "step"), t.num(r, "smoothed_loss")}; });
  f.svg = render_svg("Flow loss: token-pretrained encoder vs from scratch", {p});
  return f;
}

Figure speed_ablation(const Table& t) {
  Figure f;
  double base = 0.0;
  for (std::size_t r = 0; r < t.rows.size(); ++r)
    if (t.str(r, "variant") == "flow_s5") base = t.num(r, "chunks_per_s");
  if (base <= 0 && !t.rows.empty()) base = t.num(0, "chunks_per_s");
  f.csv = "variant,passes_per_chunk,median_ms,chunks_per_s,relative_throughput\n";
  Panel p{"variant", "chunks per second", false, false, true, {}};
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const double cps = t.num(r, "chunks_per_s");
    f.csv += t.str(r, "variant") + "," + t.str(r, "passes_per_chunk") + "," + fmt(t.num(r, "median_ms")) + "," + fmt(cps) +
             "," + fmt(cps / base) + "\n";
    p.series.push_back({t.str(r, "variant"), {double(r)}, {cps}});
  }
  f.svg = render_svg("Inference throughput at batch size 1", {p});
  return f;
}

Figure scaling_law(const Table& t) {
  std::vector<LossPoint> pts;
  for (std::size_t r = 0; r < t.rows.size(); ++r) pts.push_back({t.num(r, "N"), t.num(r, "D"), t.num(r, "loss")});
  bool fitted = false;
  ScalingParams params;
  try {
    params = fit_scaling_law(pts).params;
    fitted = true;
  } catch (const ContractError&) {
  }
  Figure f;
  f.csv = "N,D,loss,fit_loss\n";
  for (const LossPoint& p : pts)
    f.csv += fmt(p.N) + "," + fmt(p.D) + "," + fmt(p.loss) + "," + (fitted ? fmt(predict_loss(params, p.N, p.D)) : "") + "\n";
  Panel p{"training tokens D", "loss", true, false, false, {}};
  p.series = group_by(t, "N", [&](std::size_t r) { return std::pair{t.num(r, "D"), t.num(r, "loss")}; });
  const std::size_t sizes = p.series.size();
  for (std::size_t k = 0; k < sizes; ++k) {
    const double N = std::stod(p.series[k].label);
    p.series[k].label = "N=" + tick_label(N);
    if (!fitted) continue;
    p.series[k].color = int(k);
    Series fit{p.series[k].label + " fit", p.series[k].x, {}, true};
    fit.color = int(k);
    for (double D : fit.x) fit.y.push_back(predict_loss(params, N, D));
    p.series.push_back(fit);
  }
  f.svg = render_svg("Loss vs tokens per model size", {p});
  return f;
}

Figure success_rate(const std::vector<int>& outcomes) {
  const SuccessCurve c = success_rate_with_se(outcomes);
  Figure f;
  f.csv = "k,p_hat,se,lower,upper\n";
  Series mean{"running p", {}, {}}, band{"+-2 SE", {}, {}, false, true}, final{"final p", {}, {}, true};
  for (std::size_t k = 0; k < c.running.size(); ++k) {
    const SuccessEstimate& e = c.running[k];
    f.csv += std::to_string(k + 1) + "," + fmt(e.p_hat) + "," + fmt(e.standard_error) + "," +
             fmt(e.p_hat - 2 * e.standard_error) + "," + fmt(e.p_hat + 2 * e.standard_error) + "\n";
    mean.x.push_back(double(k + 1));
    mean.y.push_back(e.p_hat);
  }
  for (std::size_t k = 0; k < c.running.size(); ++k) {
    band.x.push_back(double(k + 1));
    band.y.push_back(std::min(1.0, c.running[k].p_hat + 2 * c.running[k].standard_error));
  }
  for (std::size_t k = c.running.size(); k-- > 0;) {
    band.x.push_back(double(k + 1));
    band.y.push_back(std::max(0.0, c.running[k].p_hat - 2 * c.running[k].standard_error));
  }
  final.x = {1.0, double(c.running.size())};
  final.y = {c.final.p_hat, c.final.p_hat};
  Panel p{"trials", "success rate", false, false, false, {band, mean, final}};
  f.svg = render_svg("Running success rate with standard error band", {p});
  return f;
}

}  // namespace

MissingArtifactError::MissingArtifactError(const fs::path& run_dir, std::vector<std::string> missing)
    : std::runtime_error("missing artifacts in " + run_dir.string() + ": " + join(missing, ", ")), missing_(std::move(missing)) {}

const std::vector<FigureSpec>& figure_specs() {
  static const std::vector<FigureSpec> specs{{"tokenizer_pareto", "pareto.csv"},
                                             {"hybrid_training", "ablation.csv"},
                                             {"speed_ablation", "latency.csv"},
                                             {"scaling_law", "scaling_points.csv"},
                                             {"success_rate", "trials.csv"}};
  return specs;
}

std::vector<fs::path> emit_figures(const fs::path& run_dir, const std::vector<std::string>& only) {
  std::vector<FigureSpec> chosen;
  for (const std::string& name : only) {
    const auto& all = figure_specs();
    const auto it = std::find_if(all.begin(), all.end(), [&](const FigureSpec& s) { return s.name == name; });
    if (it == all.end()) throw ConfigError("unknown figure '" + name + "'");
    chosen.push_back(*it);
  }
  if (only.empty()) chosen = figure_specs();

  std::vector<std::string> missing;
  for (const FigureSpec& s : chosen)
    if (!fs::is_regular_file(run_dir / s.input)) missing.push_back(s.input);
  if (!missing.empty()) throw MissingArtifactError(run_dir, missing);

  const fs::path out = run_dir / "figures";
  fs::create_directories(out);
  std::vector<fs::path> written;
  for (const FigureSpec& s : chosen) {
    Figure f;
    if (s.name == "success_rate") {
      f = success_rate(read_trials_csv(run_dir / s.input));
    } else {
      const Table t = read_table(run_dir / s.input);
      if (s.name == "tokenizer_pareto") f = tokenizer_pareto(t);
      if (s.name == "hybrid_training") f = hybrid_training(t);
      if (s.name == "speed_ablation") f = speed_ablation(t);
      if (s.name == "scaling_law") f = scaling_law(t);
    }
    const std::string run_id = fs::absolute(run_dir).lexically_normal().filename().string();
    f.svg.insert(f.svg.find('\n') + 1, "<!-- run " + run_id + " -->\n");
    write_text(out / (s.name + ".csv"), f.csv);
    write_text(out / (s.name + ".svg"), f.svg);
    written.push_back(out / (s.name + ".csv"));
    written.push_back(out / (s.name + ".svg"));
  }
  return written;
}

void write_trials_csv(const std::vector<int>& outcomes, const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path.string());
  f << "trial,success\n";
  for (std::size_t i = 0; i < outcomes.size(); ++i) f << i + 1 << ',' << outcomes[i] << '\n';
}

std::vector<int> read_trials_csv(const fs::path& path) {
  const Table t = read_table(path);
  std::vector<int> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const std::string& v = t.str(r, "success");
    if (v != "0" && v != "1") throw FormatError(path.string() + ": success must be 0 or 1, got '" + v + "'");
    out.push_back(v == "1");
  }
  return out;
}

}  // namespace chunkflow
