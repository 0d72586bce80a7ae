#pragma once

#include <filesystem>
#include <string>

#include "riskwatch/datagen.hpp"
#include "riskwatch/preprocess.hpp"

namespace test_support {

inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::path(RISKWATCH_TEST_TMP) / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline riskwatch::Record stock_record(riskwatch::Date day, const std::string& id, double close, double volume = 1e6) {
    using namespace riskwatch;
    Record r;
    r.timestamp = day;
    r.instrument = id;
    r.kind = RecordKind::stock;
    r.values.assign(kind_fields(RecordKind::stock).size(), 1.0);
    for (auto f : {"open", "high", "low", "close", "adj_close", "vwap"})
        r.values[std::size_t(field_index(RecordKind::stock, f))] = close;
    r.values[std::size_t(field_index(RecordKind::stock, "volume"))] = volume;
    r.values[std::size_t(field_index(RecordKind::stock, "bid_ask_spread"))] = 0.001;
    return r;
}

/// Single-column matrix on consecutive days; NaN entries are missing.
inline riskwatch::FeatureMatrix column_matrix(const std::vector<double>& v, const std::string& name = "x") {
    using namespace riskwatch;
    std::vector<Date> days;
    for (std::size_t i = 0; i < v.size(); ++i) days.push_back(Date::from_ymd(2020, 1, 1) + int(i));
    auto m = FeatureMatrix::empty(days, {name});
    for (std::size_t i = 0; i < v.size(); ++i) {
        m.values(Eigen::Index(i), 0) = v[i];
        m.missing(Eigen::Index(i), 0) = std::isnan(v[i]);
    }
    return m;
}

} // namespace test_support
