#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <json.hpp>

#include "biax/episodes.hpp"
#include "biax/model.hpp"

namespace biax {

/// Malformed input data (ragged CSV rows, unreadable files).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- CSV

/// Header plus string cells. Empty cells and "NA" count as missing.
struct RawTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column_index(const std::string& name) const {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw ContractError("no column named '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    }
    std::vector<std::string> column(std::size_t j) const {
        std::vector<std::string> out;
        for (const auto& r : rows) out.push_back(r[j]);
        return out;
    }
    RawTable without_column(std::size_t j) const {
        RawTable t;
        for (std::size_t k = 0; k < header.size(); ++k)
            if (k != j) t.header.push_back(header[k]);
        for (const auto& r : rows) {
            auto row = r;
            row.erase(row.begin() + static_cast<std::ptrdiff_t>(j));
            t.rows.push_back(std::move(row));
        }
        return t;
    }
};

inline bool is_missing(const std::string& s) { return s.empty() || s == "NA"; }

inline bool parse_number(const std::string& s, double& out) {
    const char* b = s.data();
    const char* e = s.data() + s.size();
    if (b != e && *b == '+') ++b;
    auto [p, ec] = std::from_chars(b, e, out);
    return ec == std::errc() && p == e && std::isfinite(out);
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// One record; quoted fields may contain commas, doubled quotes and newlines.
inline bool read_record(std::istream& in, std::vector<std::string>& fields) {
    fields.clear();
    std::string line;
    if (!std::getline(in, line)) return false;
    std::string cur;
    bool quoted = false, was_quoted = false;
    for (std::size_t i = 0;; ++i) {
        if (i == line.size()) {
            if (quoted) {
                if (!std::getline(in, line)) throw DataError("csv: unterminated quoted field");
                cur += '\n';
                i = static_cast<std::size_t>(-1);
                continue;
            }
            break;
        }
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = was_quoted = true;
        } else if (c == ',') {
            fields.push_back(was_quoted ? cur : trim(cur));
            cur.clear();
            was_quoted = false;
        } else {
            cur += c;
        }
    }
    fields.push_back(was_quoted ? cur : trim(cur));
    return true;
}

}  // namespace detail

inline RawTable parse_csv(std::istream& in) {
    RawTable t;
    std::vector<std::string> fields;
    if (!detail::read_record(in, t.header)) throw DataError("csv: missing header row");
    std::size_t line = 1;
    while (detail::read_record(in, fields)) {
        ++line;
        if (fields.size() == 1 && fields[0].empty()) continue;  // blank line
        if (fields.size() != t.header.size()) {
            throw DataError("csv: line " + std::to_string(line) + " has " + std::to_string(fields.size()) +
                            " fields, header has " + std::to_string(t.header.size()));
        }
        t.rows.push_back(fields);
    }
    return t;
}

inline RawTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    return parse_csv(in);
}

// ---------------------------------------------------------------- views

enum class Normalization { none, power, quantile, robust };
enum class Shuffle { none, circular, random, latin };

inline const char* normalization_name(Normalization n) {
    switch (n) {
        case Normalization::none: return "none";
        case Normalization::power: return "power";
        case Normalization::quantile: return "quantile";
        case Normalization::robust: return "robust";
    }
    return "?";
}

inline const char* shuffle_name(Shuffle s) {
    switch (s) {
        case Shuffle::none: return "none";
        case Shuffle::circular: return "circular";
        case Shuffle::random: return "random";
        case Shuffle::latin: return "latin";
    }
    return "?";
}

struct ViewSpec {
    Normalization normalization = Normalization::none;
    Shuffle shuffle = Shuffle::none;
    std::uint64_t shuffle_seed = 0;  // circular shift / random seed / latin row
    std::vector<int> class_perm;     // empty means identity
};

inline void check_permutation(const std::vector<int>& perm, std::size_t C) {
    if (perm.size() != C) throw ContractError("class_perm has " + std::to_string(perm.size()) + " entries, expected " + std::to_string(C));
    std::vector<bool> seen(C, false);
    for (int p : perm) {
        if (p < 0 || std::size_t(p) >= C || seen[p]) throw ContractError("class_perm is not a bijection");
        seen[p] = true;
    }
}

inline std::vector<int> identity_perm(std::size_t C) {
    std::vector<int> p(C);
    std::iota(p.begin(), p.end(), 0);
    return p;
}

/// Output column i holds input column order[i].
inline std::vector<std::size_t> column_order(Shuffle s, std::uint64_t seed, std::size_t m) {
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    if (m == 0) return order;
    switch (s) {
        case Shuffle::none: break;
        case Shuffle::circular: {
            const std::size_t shift = seed % m;
            for (std::size_t i = 0; i < m; ++i) order[i] = (i + m - shift) % m;
            break;
        }
        case Shuffle::random: {
            std::mt19937_64 rng(seed);
            std::shuffle(order.begin(), order.end(), rng);
            break;
        }
        case Shuffle::latin: {
            // row r of the Latin square L[r][i] = (r - i) mod m
            const std::size_t r = seed % m;
            for (std::size_t i = 0; i < m; ++i) order[i] = (r + m - i) % m;
            break;
        }
    }
    return order;
}

/// Scores [n x C] where column perm[c] holds class c: what a model emits when
/// support labels were relabeled y -> perm[y].
inline std::vector<float> permute_logits(const std::vector<float>& scores, std::size_t C, const std::vector<int>& perm) {
    check_permutation(perm, C);
    std::vector<float> out(scores.size());
    for (std::size_t r = 0; r < scores.size() / C; ++r)
        for (std::size_t c = 0; c < C; ++c) out[r * C + perm[c]] = scores[r * C + c];
    return out;
}

/// Inverse of permute_logits: output column c = input column perm[c].
inline std::vector<float> realign_logits(const std::vector<float>& scores, std::size_t C, const std::vector<int>& perm) {
    check_permutation(perm, C);
    std::vector<float> out(scores.size());
    for (std::size_t r = 0; r < scores.size() / C; ++r)
        for (std::size_t c = 0; c < C; ++c) out[r * C + c] = scores[r * C + perm[c]];
    return out;
}

inline Tensor realign_logits(const Tensor& logits, const std::vector<int>& perm) {
    if (logits.rank() != 2) throw ShapeError("realign_logits: expected [n, C]");
    auto v = realign_logits(std::vector<float>(logits.values().begin(), logits.values().end()), logits.dim(1), perm);
    return Tensor(logits.shape(), std::move(v));
}

// ---------------------------------------------------------------- fitting

struct PipelineConfig {
    std::size_t views = 4;
    double temperature = 1.0;
    double z_clip = 4.0;
    double numeric_threshold = 0.9;  // share of non-missing cells that must parse
    std::uint64_t seed = 0;

    void validate() const {
        if (views < 1) throw ConfigError("pipeline: need at least one view");
        if (!(temperature > 0)) throw ConfigError("pipeline: temperature must be positive");
        if (!(z_clip > 0)) throw ConfigError("pipeline: z_clip must be positive");
    }
    nlohmann::json to_json() const {
        return {{"views", views}, {"temperature", temperature}, {"z_clip", z_clip},
                {"numeric_threshold", numeric_threshold}, {"seed", seed}};
    }
    static PipelineConfig from_json(const nlohmann::json& j) {
        PipelineConfig c;
        if (j.contains("views")) j.at("views").get_to(c.views);
        if (j.contains("temperature")) j.at("temperature").get_to(c.temperature);
        if (j.contains("z_clip")) j.at("z_clip").get_to(c.z_clip);
        if (j.contains("numeric_threshold")) j.at("numeric_threshold").get_to(c.numeric_threshold);
        if (j.contains("seed")) j.at("seed").get_to(c.seed);
        return c;
    }
};

enum class ColumnKind { numeric, categorical };

struct ColumnState {
    std::string name;
    ColumnKind kind = ColumnKind::numeric;
    double median = 0.0;               // numeric imputation value
    std::map<std::string, int> codes;  // categorical: first-appearance order
    int missing_code = 0;              // categorical: code after all seen values
};

/// Fitted statistics for one normalization, per column.
struct NormStats {
    std::vector<double> pre_mean, pre_std;        // power: standardize before Yeo-Johnson
    std::vector<double> lambda;                   // power
    std::vector<std::vector<double>> sorted;      // quantile: fit values
    std::vector<double> center, spread;           // robust: median, IQR
    std::vector<double> z_mean, z_std;            // after normalization, for clipping
};

struct FitState {
    std::vector<std::string> feature_names;  // every fit-time feature column, dropped ones included
    std::vector<ColumnState> columns;        // kept columns
    std::vector<std::string> dropped;
    std::size_t n = 0;
    std::vector<double> X;  // [n, columns.size()], encoded, missing = NaN
    std::vector<int> labels;
    std::size_t num_classes = 0;
    std::vector<std::string> label_names;
    std::map<Normalization, NormStats> norms;
    std::vector<ViewSpec> views;
    double z_clip = 4.0;
    double temperature = 1.0;

    std::size_t m() const { return columns.size(); }
};

namespace detail {

inline double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

// Linear interpolation between order statistics at p * (n - 1).
inline double quantile_sorted(const std::vector<double>& s, double p) {
    if (s.empty()) return 0.0;
    const double pos = p * double(s.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, s.size() - 1);
    return s[lo] + (pos - double(lo)) * (s[hi] - s[lo]);
}

inline double yeo_johnson(double y, double lambda) {
    if (y >= 0) return std::abs(lambda) < 1e-12 ? std::log1p(y) : (std::pow(y + 1.0, lambda) - 1.0) / lambda;
    return std::abs(lambda - 2.0) < 1e-12 ? -std::log1p(-y) : -(std::pow(1.0 - y, 2.0 - lambda) - 1.0) / (2.0 - lambda);
}

// Coarse grid over [-2, 2] maximizing the Gaussian profile log-likelihood.
inline double fit_yeo_johnson(const std::vector<double>& y) {
    double best_l = 1.0, best = -std::numeric_limits<double>::infinity();
    double jac = 0;
    for (double v : y) jac += (v >= 0 ? 1.0 : -1.0) * std::log1p(std::abs(v));
    for (int k = -8; k <= 8; ++k) {
        const double l = 0.25 * k;
        double mean = 0, sq = 0;
        for (double v : y) mean += yeo_johnson(v, l);
        mean /= double(y.size());
        for (double v : y) sq += std::pow(yeo_johnson(v, l) - mean, 2);
        const double var = sq / double(y.size());
        if (!(var > 1e-300) || !std::isfinite(var)) continue;
        const double ll = -0.5 * double(y.size()) * std::log(var) + (l - 1.0) * jac;
        if (ll > best) {
            best = ll;
            best_l = l;
        }
    }
    return best_l;
}

inline void mean_std(const std::vector<double>& v, double& mean, double& sd) {
    mean = 0;
    for (double x : v) mean += x;
    mean /= double(std::max<std::size_t>(v.size(), 1));
    double sq = 0;
    for (double x : v) sq += (x - mean) * (x - mean);
    sd = v.empty() ? 1.0 : std::sqrt(sq / double(v.size()));
    if (!(sd > 1e-12)) sd = 1.0;
}

inline double normalize_value(double v, const NormStats& st, Normalization kind, std::size_t j) {
    switch (kind) {
        case Normalization::none: return v;
        case Normalization::power: return yeo_johnson((v - st.pre_mean[j]) / st.pre_std[j], st.lambda[j]);
        case Normalization::quantile: {
            const auto& s = st.sorted[j];
            const double n = double(s.size());
            const auto lo = std::lower_bound(s.begin(), s.end(), v), hi = std::upper_bound(s.begin(), s.end(), v);
            double F = (double(lo - s.begin()) + 0.5 * double(hi - lo)) / n;
            F = std::clamp(F, 0.5 / n, 1.0 - 0.5 / n);
            return boost::math::quantile(boost::math::normal_distribution<double>(), F);
        }
        case Normalization::robust: return (v - st.center[j]) / st.spread[j];
    }
    return v;
}

// Fills the normalization parameters of `st` from imputed fit columns.
inline NormStats fit_norm(const std::vector<std::vector<double>>& cols, Normalization kind) {
    NormStats st;
    const std::size_t m = cols.size();
    if (kind == Normalization::power) {
        st.pre_mean.resize(m);
        st.pre_std.resize(m);
        st.lambda.resize(m);
        for (std::size_t j = 0; j < m; ++j) {
            mean_std(cols[j], st.pre_mean[j], st.pre_std[j]);
            std::vector<double> z;
            for (double v : cols[j]) z.push_back((v - st.pre_mean[j]) / st.pre_std[j]);
            st.lambda[j] = fit_yeo_johnson(z);
        }
    } else if (kind == Normalization::quantile) {
        for (const auto& c : cols) {
            auto s = c;
            std::sort(s.begin(), s.end());
            st.sorted.push_back(std::move(s));
        }
    } else if (kind == Normalization::robust) {
        for (const auto& c : cols) {
            auto s = c;
            std::sort(s.begin(), s.end());
            st.center.push_back(quantile_sorted(s, 0.5));
            const double iqr = quantile_sorted(s, 0.75) - quantile_sorted(s, 0.25);
            st.spread.push_back(iqr > 1e-12 ? iqr : 1.0);
        }
    }
    st.z_mean.resize(m);
    st.z_std.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
        std::vector<double> t;
        for (double v : cols[j]) t.push_back(normalize_value(v, st, kind, j));
        mean_std(t, st.z_mean[j], st.z_std[j]);
    }
    return st;
}

inline std::vector<int> dense_labels(const std::vector<std::string>& y, std::vector<std::string>& names) {
    std::set<std::string> distinct(y.begin(), y.end());
    names.assign(distinct.begin(), distinct.end());
    bool numeric = true;
    for (const auto& s : names) {
        double v;
        numeric = numeric && parse_number(s, v);
    }
    if (numeric) {
        std::sort(names.begin(), names.end(), [](const std::string& a, const std::string& b) {
            double x, y2;
            parse_number(a, x);
            parse_number(b, y2);
            return x < y2;
        });
    }
    std::map<std::string, int> id;
    for (std::size_t i = 0; i < names.size(); ++i) id[names[i]] = static_cast<int>(i);
    std::vector<int> out;
    for (const auto& s : y) out.push_back(id.at(s));
    return out;
}

}  // namespace detail

/// Default ensemble: normalization and shuffle cycle together; every fourth
/// view also permutes the class ids.
inline std::vector<ViewSpec> default_views(std::size_t count, std::size_t C, std::uint64_t seed) {
    std::vector<ViewSpec> views;
    for (std::size_t v = 0; v < count; ++v) {
        ViewSpec s;
        s.normalization = static_cast<Normalization>(v % 4);
        s.shuffle = static_cast<Shuffle>(v % 4);
        s.shuffle_seed = s.shuffle == Shuffle::random ? detail::mix_seed(seed, v) : v;
        s.class_perm = identity_perm(C);
        if (v % 4 == 3) {
            std::mt19937_64 rng(detail::mix_seed(seed ^ 0xc1a55ull, v));
            std::shuffle(s.class_perm.begin(), s.class_perm.end(), rng);
        }
        views.push_back(std::move(s));
    }
    return views;
}

/// Fits from an already numeric matrix [n, m] (NaN marks missing cells).
/// All columns are treated as numeric.
inline FitState fit_numeric(const std::vector<double>& X, std::size_t n, std::size_t m, const std::vector<int>& labels,
                            const PipelineConfig& cfg, WarningLog* warnings = nullptr,
                            std::vector<std::string> names = {}) {
    cfg.validate();
    if (n == 0 || m == 0) throw ContractError("fit: empty table");
    if (X.size() != n * m || labels.size() != n) throw ContractError("fit: matrix/label size mismatch");
    if (names.empty())
        for (std::size_t j = 0; j < m; ++j) names.push_back("f" + std::to_string(j));
    FitState st;
    st.feature_names = names;
    st.n = n;
    st.labels = labels;
    const int max_label = *std::max_element(labels.begin(), labels.end());
    if (*std::min_element(labels.begin(), labels.end()) < 0) throw ContractError("fit: negative label");
    st.num_classes = static_cast<std::size_t>(max_label + 1);
    std::vector<bool> present(st.num_classes, false);
    for (int y : labels) present[y] = true;
    if (std::find(present.begin(), present.end(), false) != present.end())
        throw ContractError("fit: labels must be dense 0..C-1");
    if (st.num_classes < 2) throw ContractError("fit: need at least two classes");
    for (std::size_t c = 0; c < st.num_classes; ++c) st.label_names.push_back(std::to_string(c));
    std::vector<std::size_t> keep;
    for (std::size_t j = 0; j < m; ++j) {
        std::vector<double> vals;
        for (std::size_t r = 0; r < n; ++r)
            if (!std::isnan(X[r * m + j])) vals.push_back(X[r * m + j]);
        if (vals.empty()) {
            st.dropped.push_back(names[j]);
            warn(warnings, "column '" + names[j] + "' has no values and was dropped");
            continue;
        }
        ColumnState cs;
        cs.name = names[j];
        cs.median = detail::median_of(vals);
        st.columns.push_back(cs);
        keep.push_back(j);
    }
    if (keep.empty()) throw ContractError("fit: every column is missing");
    st.X.resize(n * keep.size());
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t k = 0; k < keep.size(); ++k) st.X[r * keep.size() + k] = X[r * m + keep[k]];
    std::vector<std::vector<double>> cols(keep.size());
    for (std::size_t k = 0; k < keep.size(); ++k)
        for (std::size_t r = 0; r < n; ++r) {
            const double v = st.X[r * keep.size() + k];
            cols[k].push_back(std::isnan(v) ? st.columns[k].median : v);
        }
    for (auto kind : {Normalization::none, Normalization::power, Normalization::quantile, Normalization::robust})
        st.norms[kind] = detail::fit_norm(cols, kind);
    st.views = default_views(cfg.views, st.num_classes, cfg.seed);
    st.z_clip = cfg.z_clip;
    st.temperature = cfg.temperature;
    return st;
}

/// Encodes raw string columns against fitted column states; NaN marks missing numeric cells.
inline std::vector<double> encode_columns(const RawTable& t, const std::vector<ColumnState>& columns) {
    std::vector<std::size_t> src;
    for (const auto& c : columns) src.push_back(t.column_index(c.name));
    std::vector<double> out(t.rows.size() * columns.size());
    for (std::size_t r = 0; r < t.rows.size(); ++r)
        for (std::size_t k = 0; k < columns.size(); ++k) {
            const auto& cell = t.rows[r][src[k]];
            const auto& cs = columns[k];
            double v = std::numeric_limits<double>::quiet_NaN();
            if (cs.kind == ColumnKind::numeric) {
                double parsed;
                if (!is_missing(cell) && parse_number(cell, parsed)) v = parsed;
            } else {
                // unseen categories share the missing code
                auto it = is_missing(cell) ? cs.codes.end() : cs.codes.find(cell);
                v = it == cs.codes.end() ? cs.missing_code : it->second;
            }
            out[r * columns.size() + k] = v;
        }
    return out;
}

/// Column kinds and categorical code maps from raw cells.
inline std::vector<ColumnState> detect_columns(const RawTable& X, double numeric_threshold = 0.9) {
    std::vector<ColumnState> columns;
    for (std::size_t j = 0; j < X.header.size(); ++j) {
        ColumnState cs;
        cs.name = X.header[j];
        std::size_t present = 0, parsed = 0;
        for (const auto& row : X.rows) {
            if (is_missing(row[j])) continue;
            ++present;
            double v;
            parsed += parse_number(row[j], v);
        }
        if (present > 0 && double(parsed) < numeric_threshold * double(present)) {
            cs.kind = ColumnKind::categorical;
            for (const auto& row : X.rows)
                if (!is_missing(row[j]) && !cs.codes.count(row[j])) {
                    const int code = static_cast<int>(cs.codes.size());
                    cs.codes[row[j]] = code;
                }
            cs.missing_code = static_cast<int>(cs.codes.size());
        }
        columns.push_back(std::move(cs));
    }
    return columns;
}

/// Fits from raw string columns and string labels.
inline FitState fit(const RawTable& X, const std::vector<std::string>& y, const PipelineConfig& cfg,
                    WarningLog* warnings = nullptr) {
    cfg.validate();
    if (X.header.empty() || X.rows.empty()) throw ContractError("fit: empty table");
    if (y.size() != X.rows.size()) throw ContractError("fit: label count differs from row count");
    for (const auto& s : y)
        if (is_missing(s)) throw ContractError("fit: missing label");
    const auto columns = detect_columns(X, cfg.numeric_threshold);
    auto encoded = encode_columns(X, columns);
    // A categorical column is never all-missing after encoding; check the raw cells.
    for (std::size_t j = 0; j < columns.size(); ++j) {
        if (columns[j].kind != ColumnKind::categorical) continue;
        bool any = false;
        for (const auto& row : X.rows) any = any || !is_missing(row[j]);
        if (!any)
            for (std::size_t r = 0; r < X.rows.size(); ++r) encoded[r * columns.size() + j] = std::numeric_limits<double>::quiet_NaN();
    }
    std::vector<std::string> label_names;
    const auto labels = detail::dense_labels(y, label_names);
    FitState st = fit_numeric(encoded, X.rows.size(), X.header.size(), labels, cfg, warnings, X.header);
    st.label_names = label_names;
    // carry kind and code maps over to the kept columns
    std::size_t k = 0;
    for (const auto& cs : columns) {
        if (k < st.columns.size() && st.columns[k].name == cs.name) {
            st.columns[k].kind = cs.kind;
            st.columns[k].codes = cs.codes;
            st.columns[k].missing_code = cs.missing_code;
            ++k;
        }
    }
    return st;
}

/// Impute -> normalize -> clip |z| to the threshold -> permute columns.
/// `X` is [n, state.m()] with NaN for missing cells.
inline std::vector<float> preprocess_view(const std::vector<double>& X, const FitState& state, const ViewSpec& view) {
    const std::size_t m = state.m();
    if (m == 0 || X.size() % m != 0) throw ShapeError("preprocess_view: matrix width differs from fitted columns");
    const std::size_t n = X.size() / m;
    const auto& st = state.norms.at(view.normalization);
    const auto order = column_order(view.shuffle, view.shuffle_seed, m);
    std::vector<float> out(n * m);
    std::vector<double> row(m);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < m; ++j) {
            double v = X[r * m + j];
            if (std::isnan(v)) v = state.columns[j].median;
            const double z = (detail::normalize_value(v, st, view.normalization, j) - st.z_mean[j]) / st.z_std[j];
            row[j] = std::clamp(z, -state.z_clip, state.z_clip);
        }
        for (std::size_t i = 0; i < m; ++i) out[r * m + i] = static_cast<float>(row[order[i]]);
    }
    return out;
}

/// Class probabilities [nq, C] for encoded query rows: per view, run the
/// model on relabeled support plus queries, realign, tempered softmax, then
/// average over views.
inline std::vector<float> predict_proba_encoded(const std::vector<double>& Xq, const FitState& state, const Model& model,
                                                WarningLog* warnings = nullptr) {
    const std::size_t m = state.m(), C = state.num_classes;
    if (Xq.empty() || Xq.size() % m != 0) throw ContractError("predict_proba: query width differs from fit-time columns");
    if (state.views.empty()) throw ContractError("predict_proba: no views");
    const std::size_t nq = Xq.size() / m;
    std::vector<float> avg(nq * C, 0.0f);
    for (const auto& view : state.views) {
        const auto perm = view.class_perm.empty() ? identity_perm(C) : view.class_perm;
        check_permutation(perm, C);
        EpisodeInput ep;
        ep.features = m;
        ep.rows = state.n + nq;
        ep.num_classes = C;
        ep.values = preprocess_view(state.X, state, view);
        const auto q = preprocess_view(Xq, state, view);
        ep.values.insert(ep.values.end(), q.begin(), q.end());
        for (int y : state.labels) ep.support_labels.push_back(perm[y]);
        const auto scores = realign_logits(class_scores(model, ep, warnings), C, perm);
        const auto p = tempered_softmax(scores, C, static_cast<float>(state.temperature));
        for (std::size_t i = 0; i < p.size(); ++i) avg[i] += p[i];
    }
    for (float& v : avg) v /= static_cast<float>(state.views.size());
    return avg;
}

/// Raw-table prediction. The query must carry exactly the fit-time feature
/// columns, in any order.
inline std::vector<float> predict_proba(const RawTable& query, const FitState& state, const Model& model,
                                        WarningLog* warnings = nullptr) {
    const std::set<std::string> want(state.feature_names.begin(), state.feature_names.end());
    const std::set<std::string> got(query.header.begin(), query.header.end());
    if (want != got || got.size() != query.header.size())
        throw ContractError("predict_proba: query columns differ from the fit-time columns");
    return predict_proba_encoded(encode_columns(query, state.columns), state, model, warnings);
}

inline std::vector<int> argmax_rows(const std::vector<float>& probs, std::size_t C) {
    std::vector<int> out;
    for (std::size_t r = 0; r < probs.size() / C; ++r) {
        const float* p = probs.data() + r * C;
        out.push_back(static_cast<int>(std::max_element(p, p + C) - p));
    }
    return out;
}

}  // namespace biax
