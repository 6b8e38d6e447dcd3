#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tbcough/csv.hpp"
#include "tbcough/error.hpp"

namespace tbcough {

/// One participant's clinical/demographic fields, kept as raw strings until
/// encoded against a schema.
struct TabularRecord {
    std::string participant_id;
    std::map<std::string, std::string> fields;
};

enum class FieldKind { YesNo, Categorical, Numeric };

struct FieldSpec {
    std::string name;
    FieldKind kind = FieldKind::Numeric;
    std::vector<std::string> categories;  // Categorical only
};

struct EncodedSlot {
    std::string field;
    std::string label;
    bool numeric = false;
};

struct EncodedVector {
    std::vector<double> values;
    std::vector<EncodedSlot> slots;
};

class EncodingSchema {
public:
    EncodingSchema() = default;
    explicit EncodingSchema(std::vector<FieldSpec> fields) : fields_(std::move(fields)) {
        for (const auto& f : fields_) {
            if (f.kind == FieldKind::Categorical)
                require(f.categories.size() >= 2, ErrorCode::InvalidArgument,
                        "categorical field needs >= 2 categories: " + f.name);
        }
    }

    const std::vector<FieldSpec>& fields() const noexcept { return fields_; }

    std::vector<EncodedSlot> slots() const {
        std::vector<EncodedSlot> out;
        for (const auto& f : fields_) {
            switch (f.kind) {
            case FieldKind::YesNo: out.push_back({f.name, f.name, false}); break;
            case FieldKind::Numeric: out.push_back({f.name, f.name, true}); break;
            case FieldKind::Categorical:
                for (const auto& c : f.categories) out.push_back({f.name, f.name + "=" + c, false});
                break;
            }
        }
        return out;
    }

    std::size_t width() const { return slots().size(); }

    bool operator==(const EncodingSchema& o) const {
        if (fields_.size() != o.fields_.size()) return false;
        for (std::size_t i = 0; i < fields_.size(); ++i) {
            const auto& a = fields_[i];
            const auto& b = o.fields_[i];
            if (a.name != b.name || a.kind != b.kind || a.categories != b.categories) return false;
        }
        return true;
    }

private:
    std::vector<FieldSpec> fields_;
};

/// Columns of the clinical table: sex, vitals, history and presenting symptoms.
inline EncodingSchema default_clinical_schema() {
    return EncodingSchema({
        {"sex", FieldKind::Categorical, {"Male", "Female"}},
        {"age", FieldKind::Numeric, {}},
        {"height_cm", FieldKind::Numeric, {}},
        {"weight_kg", FieldKind::Numeric, {}},
        {"heart_rate_bpm", FieldKind::Numeric, {}},
        {"temperature_c", FieldKind::Numeric, {}},
        {"cough_duration_days", FieldKind::Numeric, {}},
        {"prior_tb_exposure", FieldKind::YesNo, {}},
        {"ptb_diagnosis", FieldKind::YesNo, {}},
        {"eptb_diagnosis", FieldKind::YesNo, {}},
        {"weight_loss", FieldKind::YesNo, {}},
        {"fever", FieldKind::YesNo, {}},
        {"night_sweats", FieldKind::YesNo, {}},
        {"hemoptysis", FieldKind::YesNo, {}},
    });
}

namespace detail {
inline std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}
inline bool is_missing(const std::string& s) {
    const auto l = lower(csv::trim(s));
    return l.empty() || l == "na" || l == "nan";
}
}  // namespace detail

/// Yes/No becomes 1/0, a categorical field gets one indicator slot per
/// category, numeric fields pass through (NaN when missing) for later scaling.
inline EncodedVector encode_record(const TabularRecord& record, const EncodingSchema& schema) {
    EncodedVector out;
    out.slots = schema.slots();
    out.values.reserve(out.slots.size());
    for (const auto& f : schema.fields()) {
        auto it = record.fields.find(f.name);
        const std::string raw = it == record.fields.end() ? std::string{} : csv::trim(it->second);
        switch (f.kind) {
        case FieldKind::YesNo: {
            const auto l = detail::lower(raw);
            if (l == "yes") out.values.push_back(1.0);
            else if (l == "no") out.values.push_back(0.0);
            else fail(ErrorCode::OutOfVocabulary,
                      "field '" + f.name + "' expects Yes/No, got '" + raw + "' for " + record.participant_id);
            break;
        }
        case FieldKind::Categorical: {
            const auto l = detail::lower(raw);
            bool hit = false;
            for (const auto& c : f.categories) {
                const bool match = detail::lower(c) == l;
                hit = hit || match;
                out.values.push_back(match ? 1.0 : 0.0);
            }
            if (!hit)
                fail(ErrorCode::OutOfVocabulary,
                     "field '" + f.name + "' has no category '" + raw + "' for " + record.participant_id);
            break;
        }
        case FieldKind::Numeric: {
            if (detail::is_missing(raw)) {
                out.values.push_back(std::numeric_limits<double>::quiet_NaN());
                break;
            }
            auto v = csv::parse_double(raw);
            require(v.has_value() && std::isfinite(*v), ErrorCode::ParseError,
                    "field '" + f.name + "' is not a finite number: '" + raw + "'");
            out.values.push_back(*v);
            break;
        }
        }
    }
    return out;
}

/// Min-max statistics fitted on training values only. Values outside the
/// training range map outside [0,1]; nothing is clipped.
class MinMaxScaler {
public:
    MinMaxScaler() = default;
    MinMaxScaler(double lo, double hi) : min_(lo), max_(hi) {}

    static MinMaxScaler fit(std::span<const double> train_values) {
        require(!train_values.empty(), ErrorCode::InvalidArgument, "min-max fit on empty column");
        const auto [lo, hi] = std::minmax_element(train_values.begin(), train_values.end());
        require(*hi > *lo, ErrorCode::DegenerateColumn, "min-max fit needs >= 2 distinct values");
        return MinMaxScaler(*lo, *hi);
    }

    double apply(double x) const { return (x - min_) / (max_ - min_); }
    double min() const noexcept { return min_; }
    double max() const noexcept { return max_; }

private:
    double min_ = 0.0;
    double max_ = 1.0;
};

inline double minmax_fit_apply(std::span<const double> train_values, double x) {
    return MinMaxScaler::fit(train_values).apply(x);
}

/// Median imputation followed by min-max scaling on the numeric slots of an
/// encoded clinical vector. Indicator slots pass through.
class TabularPreprocessor {
public:
    TabularPreprocessor() = default;

    static TabularPreprocessor fit(const std::vector<std::vector<double>>& train_rows,
                                   const std::vector<EncodedSlot>& slots) {
        require(!train_rows.empty(), ErrorCode::InvalidArgument, "tabular fit on zero rows");
        TabularPreprocessor p;
        p.numeric_.resize(slots.size());
        p.medians_.assign(slots.size(), 0.0);
        p.scalers_.resize(slots.size());
        for (std::size_t j = 0; j < slots.size(); ++j) {
            p.numeric_[j] = slots[j].numeric;
            if (!slots[j].numeric) continue;
            std::vector<double> col;
            for (const auto& r : train_rows) {
                require(r.size() == slots.size(), ErrorCode::LengthMismatch, "tabular row width");
                if (std::isfinite(r[j])) col.push_back(r[j]);
            }
            require(!col.empty(), ErrorCode::DegenerateColumn, "all values missing in " + slots[j].label);
            std::vector<double> sorted = col;
            std::sort(sorted.begin(), sorted.end());
            const std::size_t m = sorted.size();
            p.medians_[j] = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
            std::vector<double> imputed;
            imputed.reserve(train_rows.size());
            for (const auto& r : train_rows) imputed.push_back(std::isfinite(r[j]) ? r[j] : p.medians_[j]);
            try {
                p.scalers_[j] = MinMaxScaler::fit(imputed);
            } catch (const Error& e) {
                fail(e.code(), std::string(e.what()) + " (column " + slots[j].label + ")");
            }
        }
        return p;
    }

    std::vector<double> apply(std::span<const double> row) const {
        require(row.size() == numeric_.size(), ErrorCode::LengthMismatch, "tabular row width");
        std::vector<double> out(row.begin(), row.end());
        for (std::size_t j = 0; j < out.size(); ++j) {
            if (!numeric_[j]) continue;
            const double v = std::isfinite(out[j]) ? out[j] : medians_[j];
            out[j] = scalers_[j].apply(v);
        }
        return out;
    }

    std::size_t width() const noexcept { return numeric_.size(); }
    const std::vector<bool>& numeric_mask() const noexcept { return numeric_; }
    const std::vector<double>& medians() const noexcept { return medians_; }
    const std::vector<MinMaxScaler>& scalers() const noexcept { return scalers_; }

    static TabularPreprocessor from_parts(std::vector<bool> numeric, std::vector<double> medians,
                                          std::vector<MinMaxScaler> scalers) {
        TabularPreprocessor p;
        p.numeric_ = std::move(numeric);
        p.medians_ = std::move(medians);
        p.scalers_ = std::move(scalers);
        return p;
    }

private:
    std::vector<bool> numeric_;
    std::vector<double> medians_;
    std::vector<MinMaxScaler> scalers_;
};

/// Tabular CSV: a participant_id column plus one column per clinical field.
inline std::map<std::string, TabularRecord> load_tabular(const std::string& path) {
    const auto table = csv::read(path);
    const auto pid = table.column("participant_id");
    require(pid.has_value(), ErrorCode::MissingColumn, "tabular CSV lacks participant_id: " + path);
    std::map<std::string, TabularRecord> out;
    for (const auto& row : table.rows) {
        TabularRecord rec;
        rec.participant_id = row[*pid];
        for (std::size_t c = 0; c < table.header.size(); ++c)
            if (c != *pid) rec.fields[table.header[c]] = row[c];
        require(!out.contains(rec.participant_id), ErrorCode::DuplicateId,
                "duplicate participant_id in tabular CSV: " + rec.participant_id);
        out.emplace(rec.participant_id, std::move(rec));
    }
    return out;
}

}  // namespace tbcough
