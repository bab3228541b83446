// SPDX-License-Identifier: Apache-2.0
#include "qadapt/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "qadapt/errors.hpp"

namespace qadapt {

using nlohmann::json;

namespace {

metrics::Tokens words_of(std::span<const int> ids, const Vocabulary& vocab) {
  metrics::Tokens out;
  for (int id : ids) out.push_back(vocab.token(id));
  return out;
}

std::string join(const metrics::Tokens& words) {
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

CaptionEval evaluate_captions(const CaptionModel& m, std::span<const CaptionSample> samples, int max_len) {
  if (samples.empty()) throw ContractError("evaluation set is empty");
  const Vocabulary vocab = caption_vocabulary(static_cast<std::size_t>(m.model.vocab));
  CaptionEval ev;
  std::vector<metrics::EvalPair> pairs;
  std::size_t hits = 0;
  for (const auto& s : samples) {
    const auto generated = generate(m, s.clip, max_len);
    const auto reference = caption_words(s.caption);
    if (generated == reference) ++hits;
    metrics::EvalPair pair{words_of(generated, vocab), {words_of(reference, vocab)}};
    ev.clip_ids.push_back(s.clip.id);
    ev.candidates.push_back(join(pair.candidate));
    ev.references.push_back(join(pair.references.front()));
    pairs.push_back(std::move(pair));
  }
  ev.summary = metrics::evaluate(pairs);
  ev.exact_match = static_cast<double>(hits) / static_cast<double>(samples.size());
  return ev;
}

json report_json(const RunReport& r) {
  json per_clip = json::array();
  for (std::size_t i = 0; i < r.eval.clip_ids.size(); ++i) {
    const auto& c = r.eval.summary.per_clip.at(i);
    per_clip.push_back({{"clip_id", r.eval.clip_ids[i]},
                        {"candidate", r.eval.candidates[i]},
                        {"reference", r.eval.references[i]},
                        {"bleu4", c.bleu4},
                        {"meteor_exact", c.meteor_exact},
                        {"rouge_l", c.rouge_l},
                        {"cider", c.cider}});
  }
  return json{{"config_hash", r.config_hash},
              {"protocol", r.protocol},
              {"mode", r.mode},
              {"adapter", r.adapter},
              {"trainable_params", r.params.trainable},
              {"total_params", r.params.total},
              {"ft_ratio", r.params.ratio()},
              {"bleu4", r.eval.summary.bleu4},
              {"bleu4_zero_order", r.eval.summary.bleu_zero_order},
              {"meteor_exact", r.eval.summary.meteor_exact},
              {"rouge_l", r.eval.summary.rouge_l},
              {"cider", r.eval.summary.cider},
              {"eval_exact_match", r.eval.exact_match},
              {"train_exact_match", r.train_exact_match},
              {"train_loss", r.train_loss},
              {"zero_shot_exact_match", r.zero_shot_exact_match},
              {"zero_shot_loss", r.zero_shot_loss},
              {"stage1_steps", r.stage1_steps},
              {"stage2_steps", r.stage2_steps},
              {"per_clip", per_clip}};
}

std::string report_csv_header() {
  return "config_hash,protocol,mode,adapter,trainable_params,total_params,ft_ratio,bleu4,meteor_exact,rouge_l,cider,"
         "eval_exact_match,train_exact_match,train_loss,zero_shot_exact_match,zero_shot_loss\n";
}

std::string report_csv_row(const RunReport& r) {
  std::ostringstream os;
  os << r.config_hash << ',' << r.protocol << ',' << r.mode << ',' << r.adapter << ',' << r.params.trainable << ','
     << r.params.total << ',' << format_double(r.params.ratio()) << ',' << format_double(r.eval.summary.bleu4) << ','
     << format_double(r.eval.summary.meteor_exact) << ',' << format_double(r.eval.summary.rouge_l) << ','
     << format_double(r.eval.summary.cider) << ',' << format_double(r.eval.exact_match) << ','
     << format_double(r.train_exact_match) << ',' << format_double(r.train_loss) << ','
     << format_double(r.zero_shot_exact_match) << ',' << format_double(r.zero_shot_loss) << '\n';
  return os.str();
}

std::string loss_curve_csv(const TrainResult& curve) {
  std::string out = "step,epoch,lr,loss\n";
  for (const auto& s : curve.curve) {
    out += std::to_string(s.step) + ',' + std::to_string(s.epoch) + ',' + format_double(s.lr) + ',' +
           format_double(s.loss) + '\n';
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           std::span<const std::string> x_values, std::span<const ChartSeries> series) {
  constexpr double kW = 640, kH = 400, kLeft = 60, kRight = 150, kTop = 40, kBottom = 60;
  static constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  double lo = 0.0, hi = 0.0;
  for (const auto& s : series) {
    if (s.values.size() != x_values.size()) throw ContractError("chart series '" + s.name + "' length mismatch");
    for (double v : s.values) hi = std::max(hi, v);
  }
  if (hi <= lo) hi = lo + 1.0;
  const double plot_w = kW - kLeft - kRight, plot_h = kH - kTop - kBottom;
  auto px = [&](std::size_t i) {
    return x_values.size() < 2 ? kLeft + plot_w / 2
                               : kLeft + plot_w * static_cast<double>(i) / static_cast<double>(x_values.size() - 1);
  };
  auto py = [&](double v) { return kTop + plot_h * (1.0 - (v - lo) / (hi - lo)); };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 "
     << kW << ' ' << kH << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title)
     << "</text>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + plot_h << "\" x2=\"" << kLeft + plot_w << "\" y2=\""
     << kTop + plot_h << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + plot_h
     << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << num(py(v) + 4) << "\" text-anchor=\"end\">" << num(v)
       << "</text>\n";
  }
  for (std::size_t i = 0; i < x_values.size(); ++i) {
    os << "<text x=\"" << num(px(i)) << "\" y=\"" << kTop + plot_h + 18 << "\" text-anchor=\"middle\">"
       << xml_escape(x_values[i]) << "</text>\n";
  }
  os << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"" << kH - 16 << "\" text-anchor=\"middle\">"
     << xml_escape(x_label) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* color = kColors[k % std::size(kColors)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < x_values.size(); ++i) {
      os << (i ? " " : "") << num(px(i)) << ',' << num(py(series[k].values[i]));
    }
    os << "\"/>\n";
    const double ly = kTop + 16.0 * static_cast<double>(k);
    os << "<line x1=\"" << kW - kRight + 12 << "\" y1=\"" << ly << "\" x2=\"" << kW - kRight + 32 << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << kW - kRight + 38 << "\" y=\"" << ly + 4 << "\">" << xml_escape(series[k].name)
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace qadapt
