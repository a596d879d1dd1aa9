#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "klaad/common.hpp"
#include "klaad/corpus.hpp"
#include "klaad/model.hpp"
#include "klaad/stats.hpp"

namespace klaad {

// |A_stereo - A_anti| after head averaging and zero-padding to a common
// size, plus the token indices the pair's bias spans cover.
struct DiffMatrix {
    Mat<double> values;
    std::vector<int> bias_rows_cols;  // sorted, unique
};

struct AttentionDiffStats {
    double frac_max_on_bias = 0.0;
    double expected_random_frac = 0.0;
    double mean_gap_bias = 0.0;
    double std_gap_bias = 0.0;
    double mean_gap_other = 0.0;
    double std_gap_other = 0.0;
    double t_stat = std::numeric_limits<double>::quiet_NaN();
    double p_value = std::numeric_limits<double>::quiet_NaN();
    bool degenerate_variance = false;
    size_t included_pairs = 0;
    size_t excluded_pairs = 0;  // pairs with no non-bias cells
};

namespace detail {

inline Mat<double> head_mean_attention(const ModelOutput& out, int valid, int t_common) {
    Mat<double> mean(t_common, t_common);
    const double inv_h = 1.0 / static_cast<double>(out.final_attention.size());
    for (const auto& a : out.final_attention)
        for (int i = 0; i < valid; ++i)
            for (int j = 0; j < valid; ++j) mean(i, j) += a(i, j) * inv_h;
    return mean;
}

}  // namespace detail

inline DiffMatrix diff_matrix(const LanguageModel& model, const TokenSequence& stereo,
                              const TokenSequence& anti, const Span& bias_span_stereo,
                              const Span& bias_span_anti) {
    const ModelOutput out_s = model.forward(stereo);
    const ModelOutput out_a = model.forward(anti);
    const int t = std::max(stereo.length, anti.length);
    const Mat<double> mean_s = detail::head_mean_attention(out_s, stereo.length, t);
    const Mat<double> mean_a = detail::head_mean_attention(out_a, anti.length, t);

    DiffMatrix d;
    d.values = Mat<double>(t, t);
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < t; ++j) d.values(i, j) = std::fabs(mean_s(i, j) - mean_a(i, j));

    std::set<int> bias;
    for (int i = bias_span_stereo.begin; i < bias_span_stereo.end; ++i)
        if (i >= 0 && i < t) bias.insert(i);
    for (int i = bias_span_anti.begin; i < bias_span_anti.end; ++i)
        if (i >= 0 && i < t) bias.insert(i);
    d.bias_rows_cols.assign(bias.begin(), bias.end());
    return d;
}

// Dataset-wide localization statistics. A cell (i, j) is bias-associated
// iff i or j lies in the pair's bias index set; the argmax tie rule is
// first occurrence in row-major order.
inline AttentionDiffStats dataset_stats(const std::vector<DiffMatrix>& diffs) {
    if (diffs.empty()) throw InputError("dataset_stats: empty diff list");

    AttentionDiffStats stats;
    std::vector<double> bias_means, other_means;
    size_t max_on_bias = 0;
    double expected_sum = 0.0;

    for (const auto& d : diffs) {
        const int t = d.values.rows;
        std::vector<char> is_bias(static_cast<size_t>(t), 0);
        for (int i : d.bias_rows_cols)
            if (i >= 0 && i < t) is_bias[static_cast<size_t>(i)] = 1;
        const int n_bias_idx =
            static_cast<int>(std::count(is_bias.begin(), is_bias.end(), 1));
        if (n_bias_idx == 0) throw InputError("dataset_stats: pair with empty bias cell set");
        const long total_cells = static_cast<long>(t) * t;
        const long other_cells =
            static_cast<long>(t - n_bias_idx) * static_cast<long>(t - n_bias_idx);
        const long bias_cells = total_cells - other_cells;
        if (other_cells == 0) {
            ++stats.excluded_pairs;
            continue;
        }

        double best = -1.0;
        int best_i = 0, best_j = 0;
        double sum_bias = 0.0, sum_other = 0.0;
        for (int i = 0; i < t; ++i) {
            for (int j = 0; j < t; ++j) {
                const double v = d.values(i, j);
                if (v > best) {
                    best = v;
                    best_i = i;
                    best_j = j;
                }
                if (is_bias[static_cast<size_t>(i)] || is_bias[static_cast<size_t>(j)])
                    sum_bias += v;
                else
                    sum_other += v;
            }
        }
        if (is_bias[static_cast<size_t>(best_i)] || is_bias[static_cast<size_t>(best_j)])
            ++max_on_bias;
        expected_sum += static_cast<double>(bias_cells) / static_cast<double>(total_cells);
        bias_means.push_back(sum_bias / static_cast<double>(bias_cells));
        other_means.push_back(sum_other / static_cast<double>(other_cells));
    }

    stats.included_pairs = bias_means.size();
    if (stats.included_pairs == 0) throw InputError("dataset_stats: no usable pairs");
    const double n = static_cast<double>(stats.included_pairs);
    stats.frac_max_on_bias = static_cast<double>(max_on_bias) / n;
    stats.expected_random_frac = expected_sum / n;

    auto mean_std = [](const std::vector<double>& xs, double& mean, double& sd) {
        mean = 0.0;
        for (double x : xs) mean += x;
        mean /= static_cast<double>(xs.size());
        if (xs.size() < 2) {
            sd = 0.0;
            return;
        }
        double ss = 0.0;
        for (double x : xs) ss += (x - mean) * (x - mean);
        sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    };
    mean_std(bias_means, stats.mean_gap_bias, stats.std_gap_bias);
    mean_std(other_means, stats.mean_gap_other, stats.std_gap_other);

    if (stats.included_pairs >= 2) {
        const TTestResult t = paired_t_test(bias_means, other_means);
        stats.t_stat = t.t;
        stats.p_value = t.p;
        stats.degenerate_variance = t.degenerate_variance;
    }
    return stats;
}

inline json stats_to_json(const AttentionDiffStats& s) {
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    return json{{"frac_max_on_bias", s.frac_max_on_bias},
                {"expected_random_frac", s.expected_random_frac},
                {"mean_gap_bias", s.mean_gap_bias},
                {"std_gap_bias", s.std_gap_bias},
                {"mean_gap_other", s.mean_gap_other},
                {"std_gap_other", s.std_gap_other},
                {"t_stat", num(s.t_stat)},
                {"p_value", num(s.p_value)},
                {"degenerate_variance", s.degenerate_variance},
                {"included_pairs", s.included_pairs},
                {"excluded_pairs", s.excluded_pairs}};
}

// ---- Heatmap export ----

namespace detail {

inline std::string csv_quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

inline std::string format_full(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Sequential light-to-dark blue ramp; monotone in value.
inline std::string heat_color(double x) {
    const double r0 = 0.97, g0 = 0.98, b0 = 1.00;
    const double r1 = 0.03, g1 = 0.19, b1 = 0.42;
    const int r = static_cast<int>(255.0 * (r0 + (r1 - r0) * x));
    const int g = static_cast<int>(255.0 * (g0 + (g1 - g0) * x));
    const int b = static_cast<int>(255.0 * (b0 + (b1 - b0) * x));
    char buf[8];
    std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
    return buf;
}

}  // namespace detail

enum class HeatmapFormat { csv, image };

inline void export_heatmap(const DiffMatrix& matrix, const std::vector<std::string>& token_labels,
                           const std::string& out_path, HeatmapFormat format) {
    const int t = matrix.values.rows;
    if (static_cast<int>(token_labels.size()) != t)
        throw InputError("export_heatmap: label count does not match matrix size");
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw IoError("export_heatmap: cannot write " + out_path);

    if (format == HeatmapFormat::csv) {
        out << "\"\"";
        for (const auto& l : token_labels) out << "," << detail::csv_quote(l);
        out << "\n";
        for (int i = 0; i < t; ++i) {
            out << detail::csv_quote(token_labels[static_cast<size_t>(i)]);
            for (int j = 0; j < t; ++j) out << "," << detail::format_full(matrix.values(i, j));
            out << "\n";
        }
        return;
    }

    // SVG raster with labeled axes; degenerate ranges render uniformly.
    double vmax = 0.0;
    for (double v : matrix.values.data) vmax = std::max(vmax, v);
    const int cell = 24, margin = 80;
    const int size = margin + t * cell + 10;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size
        << "\">\n";
    for (int i = 0; i < t; ++i) {
        for (int j = 0; j < t; ++j) {
            const double x = vmax > 0.0 ? matrix.values(i, j) / vmax : 0.0;
            out << "<rect x=\"" << margin + j * cell << "\" y=\"" << margin + i * cell
                << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\""
                << detail::heat_color(x) << "\"/>\n";
        }
    }
    for (int i = 0; i < t; ++i) {
        out << "<text x=\"" << margin - 6 << "\" y=\"" << margin + i * cell + cell / 2 + 4
            << "\" font-size=\"10\" text-anchor=\"end\">" << token_labels[static_cast<size_t>(i)]
            << "</text>\n";
        out << "<text x=\"" << margin + i * cell + cell / 2 << "\" y=\"" << margin - 6
            << "\" font-size=\"10\" text-anchor=\"middle\" transform=\"rotate(-45 "
            << margin + i * cell + cell / 2 << " " << margin - 6 << ")\">"
            << token_labels[static_cast<size_t>(i)] << "</text>\n";
    }
    out << "</svg>\n";
}

// Parses a heatmap CSV back into values; used by round-trip checks and
// downstream tooling.
inline Mat<double> parse_heatmap_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open heatmap csv: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty heatmap csv: " + path);
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> vals;
        size_t pos = 0;
        bool in_quotes = false;
        size_t field_start = 0;
        std::vector<std::string> fields;
        for (pos = 0; pos <= line.size(); ++pos) {
            if (pos == line.size() || (line[pos] == ',' && !in_quotes)) {
                fields.push_back(line.substr(field_start, pos - field_start));
                field_start = pos + 1;
            } else if (line[pos] == '"') {
                in_quotes = !in_quotes;
            }
        }
        for (size_t f = 1; f < fields.size(); ++f) vals.push_back(std::stod(fields[f]));
        rows.push_back(std::move(vals));
    }
    Mat<double> m(static_cast<int>(rows.size()), rows.empty() ? 0 : static_cast<int>(rows[0].size()));
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = 0; j < rows[i].size(); ++j)
            m(static_cast<int>(i), static_cast<int>(j)) = rows[i][j];
    return m;
}

}  // namespace klaad
