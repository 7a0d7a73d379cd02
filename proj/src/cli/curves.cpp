#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <tuple>

#include "tlab/cli.hpp"

namespace tlab {

std::vector<EpochMetrics> merge_metrics(std::span<const std::filesystem::path> paths) {
  std::vector<EpochMetrics> rows;
  for (const auto& p : paths) {
    auto part = read_metrics_csv(p);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  std::stable_sort(rows.begin(), rows.end(), [](const EpochMetrics& a, const EpochMetrics& b) {
    return std::tuple(static_cast<int>(a.variant), a.trial, a.epoch) <
           std::tuple(static_cast<int>(b.variant), b.trial, b.epoch);
  });
  return rows;
}

namespace {

struct Point {
  double epoch;
  double loss;
};

struct Series {
  std::string label;
  std::string color;
  bool dashed;
  std::vector<Point> points;
};

// Round step (1, 2 or 5 times a power of ten) giving about `target` ticks.
double nice_step(double span, int target) {
  const double raw = span / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  const double norm = raw / mag;
  const double step = norm < 1.5 ? 1 : norm < 3.5 ? 2 : norm < 7.5 ? 5 : 10;
  return step * mag;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

}  // namespace

std::string render_loss_svg(std::span<const EpochMetrics> rows) {
  // Mean over trials of each (variant, epoch).
  std::map<std::pair<int, std::size_t>, std::tuple<double, double, std::size_t>> acc;
  for (const auto& r : rows) {
    auto& [train, val, n] = acc[{static_cast<int>(r.variant), r.epoch}];
    train += r.train_loss;
    val += r.val_loss;
    ++n;
  }
  std::vector<Series> series;
  for (Variant v : {Variant::baseline, Variant::proposed}) {
    const std::string color = v == Variant::baseline ? "#d62728" : "#1f77b4";
    Series train{to_string(v) + " train", color, true, {}};
    Series val{to_string(v) + " validation", color, false, {}};
    for (const auto& [key, sums] : acc) {
      if (key.first != static_cast<int>(v)) continue;
      const auto& [t, s, n] = sums;
      train.points.push_back({static_cast<double>(key.second), t / static_cast<double>(n)});
      val.points.push_back({static_cast<double>(key.second), s / static_cast<double>(n)});
    }
    if (!train.points.empty()) {
      series.push_back(std::move(train));
      series.push_back(std::move(val));
    }
  }

  double max_epoch = 2;
  double max_loss = 0;
  for (const auto& s : series) {
    for (const auto& p : s.points) {
      max_epoch = std::max(max_epoch, p.epoch);
      max_loss = std::max(max_loss, p.loss);
    }
  }
  if (max_loss <= 0) max_loss = 1;
  const double y_step = nice_step(max_loss, 5);
  const double y_max = std::ceil(max_loss / y_step) * y_step;
  const double x_step = std::max(1.0, std::ceil(nice_step(max_epoch - 1, 8)));

  const double width = 720, height = 460;
  const double left = 70, right = 190, top = 40, bottom = 60;
  const double plot_w = width - left - right;
  const double plot_h = height - top - bottom;
  auto sx = [&](double epoch) { return left + (epoch - 1) / (max_epoch - 1) * plot_w; };
  auto sy = [&](double loss) { return top + (1 - loss / y_max) * plot_h; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << ' ' << height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left + plot_w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
     << "Training and validation loss</text>\n";

  for (double y = 0; y <= y_max + 1e-9; y += y_step) {
    os << "<line x1=\"" << num(left) << "\" y1=\"" << num(sy(y)) << "\" x2=\"" << num(left + plot_w)
       << "\" y2=\"" << num(sy(y)) << "\" stroke=\"#e0e0e0\"/>\n";
    os << "<text x=\"" << num(left - 8) << "\" y=\"" << num(sy(y) + 4)
       << "\" text-anchor=\"end\">" << tick_label(y) << "</text>\n";
  }
  for (double e = 1; e <= max_epoch + 1e-9; e += x_step) {
    os << "<line x1=\"" << num(sx(e)) << "\" y1=\"" << num(top + plot_h) << "\" x2=\"" << num(sx(e))
       << "\" y2=\"" << num(top + plot_h + 5) << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << num(sx(e)) << "\" y=\"" << num(top + plot_h + 20)
       << "\" text-anchor=\"middle\">" << tick_label(e) << "</text>\n";
  }
  os << "<path d=\"M" << num(left) << ' ' << num(top) << " V" << num(top + plot_h) << " H"
     << num(left + plot_w) << "\" fill=\"none\" stroke=\"black\"/>\n";
  os << "<text x=\"" << num(left + plot_w / 2) << "\" y=\"" << num(height - 15)
     << "\" text-anchor=\"middle\">Epoch</text>\n";
  os << "<text x=\"18\" y=\"" << num(top + plot_h / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
     << num(top + plot_h / 2) << ")\">Loss</text>\n";

  for (const auto& s : series) {
    const std::string dash = s.dashed ? " stroke-dasharray=\"6 4\"" : "";
    os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"2\"" << dash
       << " points=\"";
    for (std::size_t i = 0; i < s.points.size(); ++i) {
      os << (i ? " " : "") << num(sx(s.points[i].epoch)) << ',' << num(sy(s.points[i].loss));
    }
    os << "\"/>\n";
    for (const auto& p : s.points) {
      os << "<circle cx=\"" << num(sx(p.epoch)) << "\" cy=\"" << num(sy(p.loss))
         << "\" r=\"3.5\" fill=\"" << (s.dashed ? "white" : s.color) << "\" stroke=\"" << s.color
         << "\"/>\n";
    }
  }

  double ly = top + 10;
  for (const auto& s : series) {
    const std::string dash = s.dashed ? " stroke-dasharray=\"6 4\"" : "";
    os << "<line x1=\"" << num(left + plot_w + 15) << "\" y1=\"" << num(ly) << "\" x2=\""
       << num(left + plot_w + 45) << "\" y2=\"" << num(ly) << "\" stroke=\"" << s.color
       << "\" stroke-width=\"2\"" << dash << "/>\n";
    os << "<text x=\"" << num(left + plot_w + 52) << "\" y=\"" << num(ly + 4) << "\">" << s.label
       << "</text>\n";
    ly += 20;
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace tlab
