#include "flowcast/report.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace flowcast {

namespace {

using nlohmann::json;

// fixed-decimal formatting with "-0.0" normalized to "0.0"
std::string fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
    std::string s(buf);
    if (s.find_first_not_of("-0.") == std::string::npos && s[0] == '-')
        s.erase(0, 1);
    return s;
}

json vec_json(const Eigen::VectorXd& v) {
    json a = json::array();
    for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

json mat_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (int i = 0; i < m.rows(); ++i) {
        json r = json::array();
        for (int j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
        rows.push_back(r);
    }
    return rows;
}

json mask_json(const Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>& m) {
    json rows = json::array();
    for (int i = 0; i < m.rows(); ++i) {
        json r = json::array();
        for (int j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
        rows.push_back(r);
    }
    return rows;
}

std::string flag_name(Flag f) {
    switch (f) {
        case Flag::strong: return "strong";
        case Flag::weak: return "weak";
        default: return "none";
    }
}

std::string pad(const std::string& s, int width) {
    if (static_cast<int>(s.size()) >= width) return s + " ";
    return s + std::string(width - s.size(), ' ');
}

json model_json(const MnlModel& m) {
    json j;
    j["zone_ids"] = m.zone_ids;
    j["options"] = m.options.labels;
    j["reference"] = m.options.labels.at(m.reference_index());
    j["covariates"] = m.covariates;
    j["x_center"] = vec_json(m.x_center);
    j["beta0"] = vec_json(m.beta0);
    j["beta"] = mat_json(m.beta);
    j["mask"] = mask_json(m.mask);
    j["z_beta0"] = vec_json(m.z_beta0);
    j["z"] = mat_json(m.z_ratios);
    j["se"] = mat_json(m.se_beta);
    j["loglik"] = m.loglik;
    j["deviance"] = m.deviance;
    j["null_deviance"] = m.null_deviance;
    j["pct_deviance_explained"] = deviance_explained(m);
    j["iterations"] = m.iterations;
    j["grad_norm"] = m.grad_norm;
    return j;
}

json residuals_json(const ResidualDiagnostics& d) {
    json j;
    j["standardized"] = mat_json(d.standardized);
    j["raw"] = mat_json(d.raw);
    j["cutoff"] = d.cutoff;
    json outs = json::array();
    for (const auto& o : d.outliers)
        outs.push_back({{"zone", o.zone_id}, {"option", o.option}, {"residual", o.residual}});
    j["outliers"] = outs;
    return j;
}

} // namespace

CsvTable flow_counts_csv(const FlowTable& F, double scale, int decimals) {
    CsvTable t;
    t.header.push_back("origin");
    for (const auto& l : F.options2.labels) t.header.push_back(l);
    t.header.push_back("total");
    for (int i = 0; i < F.F.rows(); ++i) {
        std::vector<std::string> row{F.options1.labels.at(i)};
        for (int j = 0; j < F.F.cols(); ++j) row.push_back(fixed(F.F(i, j) * scale, decimals));
        row.push_back(fixed(F.row_margins(i) * scale, decimals));
        t.rows.push_back(row);
    }
    std::vector<std::string> total{"total"};
    for (int j = 0; j < F.F.cols(); ++j) total.push_back(fixed(F.col_margins(j) * scale, decimals));
    total.push_back(fixed(F.row_margins.sum() * scale, decimals));
    t.rows.push_back(total);
    return t;
}

CsvTable flow_percent_csv(const FlowTable& F) {
    Eigen::MatrixXd pct = row_percentages(F);
    CsvTable t;
    t.header.push_back("origin");
    for (const auto& l : F.options2.labels) t.header.push_back(l);
    for (int i = 0; i < pct.rows(); ++i) {
        std::vector<std::string> row{F.options1.labels.at(i)};
        for (int j = 0; j < pct.cols(); ++j) row.push_back(fixed(pct(i, j), 1));
        t.rows.push_back(row);
    }
    return t;
}

std::string render_table3(const std::vector<ModelReport>& models) {
    std::ostringstream out;
    out << "Marginal effects of significant covariates on transition probabilities\n";
    out << "(**: p < strong threshold, *: p < weak threshold; unflagged cells print 0)\n";
    if (models.empty()) return out.str();

    // panels per option of the varying side, rows per anchor model
    std::vector<std::string> panel_options;
    for (const auto& r : models)
        for (const auto& l : r.model.options.labels)
            if (std::find(panel_options.begin(), panel_options.end(), l) == panel_options.end())
                panel_options.push_back(l);
    const std::vector<std::string>& covs = models.front().model.covariates;
    int w = 12;
    for (const auto& c : covs) w = std::max(w, static_cast<int>(c.size()) + 2);

    for (const auto& opt : panel_options) {
        bool outgoing = true;
        for (const auto& r : models)
            if (r.model.options.has(opt)) { outgoing = r.direction == Direction::outgoing; break; }
        out << "\n"
            << (outgoing ? "Outgoing transitions towards " : "Incoming transitions from ") << opt
            << "\n";
        out << pad("origin", 16);
        for (const auto& c : covs) out << pad(c, w);
        out << "\n";
        for (const auto& r : models) {
            int k = r.model.options.index_of(opt);
            if (k < 0) continue;
            out << pad(r.anchor, 16);
            for (int v = 0; v < static_cast<int>(covs.size()); ++v) {
                Flag f = r.flags.flags.at(k).at(v);
                std::string cell = "0";
                if (f == Flag::strong)
                    cell = fixed(r.marginal(k, v), 3) + "**";
                else if (f == Flag::weak)
                    cell = fixed(r.marginal(k, v), 3) + "*";
                out << pad(cell, w);
            }
            out << "\n";
        }
    }
    return out.str();
}

std::string render_tableC1(const std::vector<ModelReport>& models) {
    std::ostringstream out;
    out << "Multinomial logit coefficients (b) and z ratios per destination\n";
    for (const auto& r : models) {
        const MnlModel& m = r.model;
        out << "\nTransitions " << (r.direction == Direction::outgoing ? "out of " : "into ")
            << r.anchor << " (% dev. " << fixed(deviance_explained(m), 1) << ")\n";
        int w = 10;
        for (const auto& c : m.covariates) w = std::max(w, static_cast<int>(c.size()) + 2);
        out << pad("option", 18) << pad("", 4);
        for (const auto& c : m.covariates) out << pad(c, w);
        out << "\n";
        for (int k = 0; k < m.options.size(); ++k) {
            if (k == m.reference_index()) continue;
            out << pad(m.options.labels[k], 18) << pad("b", 4);
            for (int v = 0; v < static_cast<int>(m.covariates.size()); ++v)
                out << pad(m.mask(k, v) ? fixed(m.beta(k, v), 2) : "0", w);
            out << "\n" << pad("", 18) << pad("z", 4);
            for (int v = 0; v < static_cast<int>(m.covariates.size()); ++v)
                out << pad(m.mask(k, v) ? fixed(m.z_ratios(k, v), 2) : "", w);
            out << "\n";
        }
    }
    return out.str();
}

json estimate_json(const TransitionEstimate& est, const FitReport& fit) {
    json j;
    j["zone_id"] = est.zone_id;
    j["options1"] = est.options1.labels;
    j["options2"] = est.options2.labels;
    j["P"] = mat_json(est.P);
    j["se_P"] = mat_json(est.se_P);
    j["theta"] = mat_json(est.theta);
    j["phi"] = est.phi;
    j["loglik"] = est.loglik;
    j["grad_norm"] = est.grad_norm;
    j["iterations"] = est.iterations;
    j["converged"] = est.converged;
    json f;
    f["pearson_stat"] = fit.pearson_stat;
    f["df"] = fit.df;
    f["pseudo_r2"] = fit.pseudo_r2;
    json st = json::array();
    for (const auto& s : fit.stations)
        st.push_back({{"station_id", s.station_id}, {"chi_square", s.chi_square}, {"df", s.df}});
    f["stations"] = st;
    j["fit"] = f;
    return j;
}

json model_report_json(const ModelReport& r) {
    json j;
    j["anchor"] = r.anchor;
    j["direction"] = direction_name(r.direction);
    j["model"] = model_json(r.model);
    j["marginal_effects"] = mat_json(r.marginal);
    j["p_values"] = mat_json(r.flags.p_values);
    json fl = json::array();
    for (const auto& row : r.flags.flags) {
        json fr = json::array();
        for (Flag f : row) fr.push_back(flag_name(f));
        fl.push_back(fr);
    }
    j["flags"] = fl;
    j["residuals"] = residuals_json(r.residuals);
    j["refit_with_dummies"] = r.refit_with_dummies;
    if (r.refit_with_dummies) {
        j["dummy_zones"] = r.dummy_zones;
        j["dummy_model"] = model_json(r.dummy_model);
        j["dummy_residuals"] = residuals_json(r.dummy_residuals);
    }
    return j;
}

json transforms_json(const CovariateMatrix& M) {
    json cols = json::array();
    for (int v = 0; v < M.cols(); ++v) {
        const Transform& t = M.transforms.at(v);
        json c;
        c["name"] = M.names[v];
        c["op"] = t.op;
        c["inputs"] = t.inputs;
        c["inverted"] = t.inverted;
        if (!t.conditioned_on.empty()) c["conditioned_on"] = t.conditioned_on;
        if (t.op == "dichotomize") c["ratio"] = t.ratio;
        c["describe"] = t.describe();
        cols.push_back(c);
    }
    json j;
    j["zones"] = M.zone_ids;
    j["columns"] = cols;
    return j;
}

std::string svg_heatmap(const FlowTable& F, const std::string& title) {
    const int I = static_cast<int>(F.F.rows());
    const int J = static_cast<int>(F.F.cols());
    const int cw = 64, ch = 28, left = 120, top = 58;
    const int width = left + J * cw + 16;
    const int height = top + I * ch + 16;
    double maxv = F.F.maxCoeff();
    if (!(maxv > 0)) maxv = 1.0;

    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    s << "<text x=\"8\" y=\"18\" font-size=\"14\">" << title << "</text>\n";
    for (int j = 0; j < J; ++j)
        s << "<text x=\"" << left + j * cw + cw / 2 << "\" y=\"" << top - 8
          << "\" text-anchor=\"middle\">" << F.options2.labels[j] << "</text>\n";
    for (int i = 0; i < I; ++i) {
        s << "<text x=\"" << left - 8 << "\" y=\"" << top + i * ch + ch / 2 + 4
          << "\" text-anchor=\"end\">" << F.options1.labels[i] << "</text>\n";
        for (int j = 0; j < J; ++j) {
            double t = F.F(i, j) / maxv;
            int r = static_cast<int>(255 + t * (31 - 255));
            int g = static_cast<int>(255 + t * (119 - 255));
            int b = static_cast<int>(255 + t * (180 - 255));
            s << "<rect x=\"" << left + j * cw << "\" y=\"" << top + i * ch << "\" width=\""
              << cw - 1 << "\" height=\"" << ch - 1 << "\" fill=\"rgb(" << r << "," << g << ","
              << b << ")\"/>\n";
            s << "<text x=\"" << left + j * cw + cw / 2 << "\" y=\"" << top + i * ch + ch / 2 + 4
              << "\" text-anchor=\"middle\" fill=\"" << (t > 0.55 ? "white" : "black") << "\">"
              << fixed(F.F(i, j), 1) << "</text>\n";
        }
    }
    s << "</svg>\n";
    return s.str();
}

std::string svg_volatility(const std::vector<VolatilityRecord>& records) {
    const int n = static_cast<int>(records.size());
    const int bh = 16, gap = 6, label_w = 90, panel_w = 250, top = 40;
    const int width = label_w + 2 * panel_w + 40;
    const int height = top + n * (bh + gap) + 16;
    double scale = 1.0;
    for (const auto& r : records)
        scale = std::max({scale, r.party_switch_pct, r.to_abstention_pct});

    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    s << "<text x=\"" << label_w << "\" y=\"20\" font-size=\"13\">party switch %</text>\n";
    s << "<text x=\"" << label_w + panel_w + 20 << "\" y=\"20\" font-size=\"13\">to abstention %</text>\n";
    for (int i = 0; i < n; ++i) {
        const auto& r = records[i];
        int y = top + i * (bh + gap);
        s << "<text x=\"" << label_w - 6 << "\" y=\"" << y + bh - 4
          << "\" text-anchor=\"end\">" << r.zone_id << "</text>\n";
        int w1 = static_cast<int>(r.party_switch_pct / scale * (panel_w - 50));
        int w2 = static_cast<int>(r.to_abstention_pct / scale * (panel_w - 50));
        s << "<rect x=\"" << label_w << "\" y=\"" << y << "\" width=\"" << w1 << "\" height=\""
          << bh << "\" fill=\"rgb(214,96,77)\"/>\n";
        s << "<text x=\"" << label_w + w1 + 4 << "\" y=\"" << y + bh - 4 << "\">"
          << fixed(r.party_switch_pct, 1) << "</text>\n";
        s << "<rect x=\"" << label_w + panel_w + 20 << "\" y=\"" << y << "\" width=\"" << w2
          << "\" height=\"" << bh << "\" fill=\"rgb(67,147,195)\"/>\n";
        s << "<text x=\"" << label_w + panel_w + 20 + w2 + 4 << "\" y=\"" << y + bh - 4 << "\">"
          << fixed(r.to_abstention_pct, 1) << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

} // namespace flowcast
