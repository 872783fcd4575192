#include "cxr/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "cxr/csv.hpp"
#include "cxr/rng.hpp"

namespace cxr {

const std::array<std::string, kNumLabels>& label_names() {
    static const std::array<std::string, kNumLabels> names = {
        "Cardiomegaly", "Emphysema",     "Edema",              "Hernia",  "Pneumothorax",
        "Effusion",     "Mass",          "Fibrosis",           "Atelectasis", "Consolidation",
        "Pleural_Thickening", "Nodule",  "Pneumonia",          "Infiltration", "No Finding"};
    return names;
}

int label_index(const std::string& name) {
    const auto& names = label_names();
    for (int i = 0; i < kNumLabels; ++i)
        if (names[static_cast<std::size_t>(i)] == name) return i;
    throw ValueError("unknown pathology token '" + name + "'");
}

LabelVector encode_labels(const std::string& findings) {
    LabelVector v{};
    std::stringstream ss(findings);
    std::string token;
    while (std::getline(ss, token, '|')) {
        if (token.empty()) continue;
        v[static_cast<std::size_t>(label_index(token))] = 1;
    }
    bool any_pathology = false;
    for (int i = 0; i < kNoFindingIndex; ++i)
        if (v[static_cast<std::size_t>(i)]) any_pathology = true;
    if (v[kNoFindingIndex] && any_pathology)
        throw ValueError("'No Finding' combined with a pathology in '" + findings + "'");
    if (!any_pathology && !v[kNoFindingIndex])
        throw ValueError("empty finding list '" + findings + "'");
    return v;
}

std::string decode_labels(const LabelVector& labels) {
    std::string out;
    for (int i = 0; i < kNumLabels; ++i) {
        if (!labels[static_cast<std::size_t>(i)]) continue;
        if (!out.empty()) out.push_back('|');
        out += label_names()[static_cast<std::size_t>(i)];
    }
    return out;
}

namespace {

float parse_age(const std::string& raw, bool& clamped) {
    std::size_t digits = 0;
    while (digits < raw.size() && std::isdigit(static_cast<unsigned char>(raw[digits]))) ++digits;
    if (digits == 0) throw ValueError("unparseable age '" + raw + "'");
    float age = std::stof(raw.substr(0, digits));
    // Some early releases carry a unit suffix (Y/M/D).
    if (digits < raw.size()) {
        const char unit = raw[digits];
        if (unit == 'M' || unit == 'm')
            age /= 12.0f;
        else if (unit == 'D' || unit == 'd')
            age /= 365.0f;
        else if (unit != 'Y' && unit != 'y')
            throw ValueError("unparseable age '" + raw + "'");
    }
    clamped = age > kMaxPlausibleAge;
    return clamped ? kMaxPlausibleAge : age;
}

} // namespace

std::vector<Record> parse_entry_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset CSV '" + path.string() + "'");
    return parse_entry_csv(in, path.string());
}

std::vector<Record> parse_entry_csv(std::istream& in, const std::string& origin) {
    std::vector<std::string> header;
    if (!read_csv_line(in, header)) throw ValueError(origin + ": empty CSV");

    std::unordered_map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
    const char* required[] = {"Image Index",  "Finding Labels", "Follow-up #",
                              "Patient ID",   "Patient Age",    "Patient Gender",
                              "View Position"};
    for (const char* name : required)
        if (!col.count(name))
            throw ValueError(origin + ": missing required column '" + std::string(name) + "'");

    std::vector<Record> records;
    std::vector<std::string> fields;
    std::size_t row = 1;
    while (read_csv_line(in, fields)) {
        ++row;
        if (fields.size() == 1 && fields[0].empty()) continue; // trailing blank line
        if (fields.size() < header.size())
            throw ValueError(origin + " row " + std::to_string(row) + ": expected " +
                             std::to_string(header.size()) + " fields, got " +
                             std::to_string(fields.size()));
        auto get = [&](const char* name) -> const std::string& { return fields[col[name]]; };
        Record r;
        r.image_ref = get("Image Index");
        try {
            r.labels = encode_labels(get("Finding Labels"));
        } catch (const ValueError& e) {
            throw ValueError(origin + " row " + std::to_string(row) + ": " + e.what());
        }
        r.follow_up = std::stoi(get("Follow-up #"));
        r.patient_id = get("Patient ID");
        r.age_years = parse_age(get("Patient Age"), r.age_clamped);
        const std::string& gender = get("Patient Gender");
        if (gender == "M")
            r.gender = 1;
        else if (gender == "F")
            r.gender = 0;
        else
            throw ValueError(origin + " row " + std::to_string(row) + ": bad gender '" + gender + "'");
        const std::string& view = get("View Position");
        if (view == "AP")
            r.view = 1;
        else if (view == "PA")
            r.view = 0;
        else
            throw ValueError(origin + " row " + std::to_string(row) + ": bad view position '" + view + "'");
        records.push_back(std::move(r));
    }
    return records;
}

double DatasetStats::gender_ratio() const {
    const auto lo = std::min(female, male);
    const auto hi = std::max(female, male);
    return lo == 0 ? 0.0 : static_cast<double>(hi) / static_cast<double>(lo);
}

double DatasetStats::view_ratio() const {
    const auto lo = std::min(pa, ap);
    const auto hi = std::max(pa, ap);
    return lo == 0 ? 0.0 : static_cast<double>(hi) / static_cast<double>(lo);
}

double DatasetStats::prevalence(int label) const {
    return records == 0
        ? 0.0
        : 100.0 * static_cast<double>(positives[static_cast<std::size_t>(label)]) /
              static_cast<double>(records);
}

DatasetStats compute_stats(std::span<const Record> records) {
    DatasetStats s;
    s.records = records.size();
    std::unordered_set<std::string> patients;
    double sum = 0.0;
    for (const Record& r : records) {
        patients.insert(r.patient_id);
        for (int i = 0; i < kNumLabels; ++i)
            if (r.labels[static_cast<std::size_t>(i)]) ++s.positives[static_cast<std::size_t>(i)];
        if (r.gender == 1)
            ++s.male;
        else
            ++s.female;
        if (r.view == 1)
            ++s.ap;
        else
            ++s.pa;
        if (r.age_clamped) ++s.ages_clamped;
        sum += r.age_years;
    }
    s.patients = patients.size();
    if (!records.empty()) {
        s.age_mean = sum / static_cast<double>(records.size());
        double var = 0.0;
        for (const Record& r : records) {
            const double d = r.age_years - s.age_mean;
            var += d * d;
        }
        s.age_std = std::sqrt(var / static_cast<double>(records.size()));
    }
    return s;
}

std::string format_stats(const DatasetStats& s) {
    std::ostringstream os;
    os << "records: " << s.records << "\npatients: " << s.patients << "\n";
    char buf[128];
    for (int i = 0; i < kNumLabels; ++i) {
        std::snprintf(buf, sizeof(buf), "%-20s %8zu  (%.2f%%)\n",
                      label_names()[static_cast<std::size_t>(i)].c_str(),
                      s.positives[static_cast<std::size_t>(i)], s.prevalence(i));
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "gender F/M: %zu/%zu (ratio %.2f)\n", s.female, s.male,
                  s.gender_ratio());
    os << buf;
    std::snprintf(buf, sizeof(buf), "view PA/AP: %zu/%zu (ratio %.2f)\n", s.pa, s.ap,
                  s.view_ratio());
    os << buf;
    std::snprintf(buf, sizeof(buf), "age: mean %.2f std %.2f (clamped %zu)\n", s.age_mean,
                  s.age_std, s.ages_clamped);
    os << buf;
    return os.str();
}

const char* to_string(Subset s) {
    switch (s) {
    case Subset::kTrain: return "train";
    case Subset::kVal: return "val";
    case Subset::kTest: return "test";
    }
    return "?";
}

Subset subset_from_string(const std::string& s) {
    if (s == "train") return Subset::kTrain;
    if (s == "val") return Subset::kVal;
    if (s == "test") return Subset::kTest;
    throw ValueError("unknown subset '" + s + "'");
}

Subset SplitPlan::subset_of(int resample, const std::string& patient_id) const {
    const auto& m = resamples.at(static_cast<std::size_t>(resample));
    const auto it = m.find(patient_id);
    if (it == m.end())
        throw ValueError("patient '" + patient_id + "' not present in resample " +
                         std::to_string(resample));
    return it->second;
}

void SplitPlan::save(const std::filesystem::path& path) const {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["tolerance_pp"] = tolerance_pp;
    j["resamples"] = nlohmann::ordered_json::array();
    for (const auto& m : resamples) {
        nlohmann::ordered_json entry;
        for (const char* name : {"train", "val", "test"}) entry[name] = nlohmann::json::array();
        for (const auto& [patient, subset] : m) entry[to_string(subset)].push_back(patient);
        j["resamples"].push_back(std::move(entry));
    }
    std::ofstream out(path);
    if (!out) throw IoError("cannot write split plan '" + path.string() + "'");
    out << j.dump(2) << "\n";
}

SplitPlan SplitPlan::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open split plan '" + path.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValueError("malformed split plan '" + path.string() + "': " + e.what());
    }
    SplitPlan plan;
    plan.seed = j.at("seed").get<std::uint64_t>();
    plan.tolerance_pp = j.value("tolerance_pp", 1.5);
    for (const auto& entry : j.at("resamples")) {
        std::map<std::string, Subset> m;
        for (const char* name : {"train", "val", "test"}) {
            for (const auto& patient : entry.at(name)) {
                const std::string id = patient.get<std::string>();
                if (m.count(id))
                    throw ValueError("split plan '" + path.string() + "': patient '" + id +
                                     "' assigned to more than one subset");
                m[id] = subset_from_string(name);
            }
        }
        plan.resamples.push_back(std::move(m));
    }
    return plan;
}

SplitPlan make_splits(std::span<const Record> records, std::uint64_t seed, int num_resamples,
                      double tolerance_pp) {
    std::map<std::string, std::size_t> images_per_patient;
    for (const Record& r : records) ++images_per_patient[r.patient_id];
    if (images_per_patient.size() < 3)
        throw ValueError("make_splits needs at least 3 patients, got " +
                         std::to_string(images_per_patient.size()));

    std::vector<std::pair<std::string, std::size_t>> patients(images_per_patient.begin(),
                                                              images_per_patient.end());
    const double total = static_cast<double>(records.size());

    SplitPlan plan;
    plan.seed = seed;
    plan.tolerance_pp = tolerance_pp;
    for (int r = 0; r < num_resamples; ++r) {
        Rng rng(Rng::mix(Rng::mix(seed, "split"), static_cast<std::uint64_t>(r)));
        std::vector<std::pair<std::string, std::size_t>> order = patients;
        rng.shuffle(order);

        const double targets[3] = {kSplitFractions[0] * total, kSplitFractions[1] * total,
                                   kSplitFractions[2] * total};
        double counts[3] = {0.0, 0.0, 0.0};
        std::map<std::string, Subset> assignment;
        for (const auto& [patient, n] : order) {
            int best = 0;
            double best_deficit = -std::numeric_limits<double>::infinity();
            for (int s = 0; s < 3; ++s) {
                const double deficit = (targets[s] - counts[s]) / targets[s];
                if (deficit > best_deficit) {
                    best_deficit = deficit;
                    best = s;
                }
            }
            assignment[patient] = static_cast<Subset>(best);
            counts[best] += static_cast<double>(n);
        }
        for (int s = 0; s < 3; ++s) {
            const double share = 100.0 * counts[s] / total;
            const double target = 100.0 * kSplitFractions[s];
            if (std::abs(share - target) > tolerance_pp)
                throw ValueError(
                    "make_splits: resample " + std::to_string(r) + " subset " +
                    to_string(static_cast<Subset>(s)) + " lands at " + std::to_string(share) +
                    "% vs target " + std::to_string(target) +
                    "%; patient sizes too coarse -- pass a larger tolerance_pp to accept");
        }
        plan.resamples.push_back(std::move(assignment));
    }
    return plan;
}

SplitCounts count_split(std::span<const Record> records, const SplitPlan& plan, int resample) {
    SplitCounts c;
    std::array<std::set<std::string>, 3> patients;
    for (const Record& r : records) {
        const auto s = static_cast<std::size_t>(plan.subset_of(resample, r.patient_id));
        ++c.images[s];
        patients[s].insert(r.patient_id);
    }
    for (int s = 0; s < 3; ++s) c.patients[static_cast<std::size_t>(s)] = patients[static_cast<std::size_t>(s)].size();
    return c;
}

void AgeScaler::fit(std::span<const float> ages) {
    if (ages.empty()) throw ValueError("AgeScaler: no ages to fit");
    min_age = *std::min_element(ages.begin(), ages.end());
    max_age = *std::max_element(ages.begin(), ages.end());
    if (!(min_age < max_age))
        throw ValueError("AgeScaler: degenerate age range [" + std::to_string(min_age) + "," +
                         std::to_string(max_age) + "]");
    fitted = true;
}

void AgeScaler::fit(std::span<const Record> records, const SplitPlan& plan, int resample) {
    std::vector<float> ages;
    for (const Record& r : records)
        if (plan.subset_of(resample, r.patient_id) == Subset::kTrain) ages.push_back(r.age_years);
    fit(ages);
}

float AgeScaler::scale(float age) const {
    if (!fitted) throw StateError("AgeScaler used before fitting");
    const float t = (age - min_age) / (max_age - min_age);
    return std::clamp(t, 0.0f, 1.0f);
}

} // namespace cxr
