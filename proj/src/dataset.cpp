#include "tileforge/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tileforge {

const char* to_string(Split s) {
    switch (s) {
        case Split::UNASSIGNED: return "UNASSIGNED";
        case Split::TRAIN: return "TRAIN";
        case Split::VAL: return "VAL";
        case Split::TEST: return "TEST";
        case Split::HELDOUT_WSI: return "HELDOUT_WSI";
        case Split::DISCARDED: return "DISCARDED";
    }
    return "?";
}

Split split_from_string(const std::string& s) {
    if (s == "UNASSIGNED") return Split::UNASSIGNED;
    if (s == "TRAIN") return Split::TRAIN;
    if (s == "VAL") return Split::VAL;
    if (s == "TEST") return Split::TEST;
    if (s == "HELDOUT_WSI") return Split::HELDOUT_WSI;
    if (s == "DISCARDED") return Split::DISCARDED;
    throw DatasetError("unknown split: " + s);
}

std::map<Split, std::array<int64_t, 2>> DatasetManifest::counts() const {
    std::map<Split, std::array<int64_t, 2>> c;
    for (const auto& e : entries)
        c[e.split][static_cast<int>(e.label)]++;
    return c;
}

void seeded_shuffle(std::vector<size_t>& idx, uint64_t seed) {
    RngStream rng(seed);
    for (size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.next_below(i)]);
}

namespace {

// Stable canonical order before any seeded draw, so results do not depend
// on store enumeration order.
void sort_indices_canonical(const DatasetManifest& m, std::vector<size_t>& idx) {
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        const auto& ea = m.entries[a];
        const auto& eb = m.entries[b];
        return std::tie(ea.slide_id, ea.grid_y, ea.grid_x) <
               std::tie(eb.slide_id, eb.grid_y, eb.grid_x);
    });
}

std::vector<size_t> eligible_indices(const DatasetManifest& m, TileLabel label) {
    std::vector<size_t> idx;
    for (size_t i = 0; i < m.entries.size(); ++i)
        if (m.entries[i].split == Split::UNASSIGNED && m.entries[i].label == label)
            idx.push_back(i);
    sort_indices_canonical(m, idx);
    return idx;
}

} // namespace

DatasetManifest manifest_from_stores(const std::vector<fs::path>& store_dirs) {
    DatasetManifest m;
    for (const auto& dir : store_dirs) {
        TileStore store = TileStore::open(dir);
        const auto& recs = store.records();
        for (size_t i = 0; i < recs.size(); ++i) {
            if (!recs[i].kept) continue;
            ManifestEntry e;
            e.store_dir = dir.string();
            e.record_index = i;
            e.slide_id = recs[i].slide_id;
            e.patient_id = recs[i].patient_id;
            e.grid_x = recs[i].grid_x;
            e.grid_y = recs[i].grid_y;
            e.label = recs[i].label;
            m.entries.push_back(std::move(e));
        }
    }
    return m;
}

DatasetManifest holdout_slides(DatasetManifest m, int n_per_class, uint64_t seed) {
    for (int cls = 0; cls < 2; ++cls) {
        TileLabel label = static_cast<TileLabel>(cls);
        // patient -> slides, only considering unassigned tiles of this class
        std::map<std::string, std::set<std::string>> by_patient;
        for (const auto& e : m.entries)
            if (e.split == Split::UNASSIGNED && e.label == label)
                by_patient[e.patient_id].insert(e.slide_id);
        if (static_cast<int>(by_patient.size()) < n_per_class)
            throw InsufficientSlides("holdout: class " + std::to_string(cls) + " has " +
                                     std::to_string(by_patient.size()) +
                                     " patients, need " + std::to_string(n_per_class));
        std::vector<std::string> patients;
        for (const auto& [p, _] : by_patient) patients.push_back(p);
        std::vector<size_t> order(patients.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        seeded_shuffle(order, hash_combine(seed, static_cast<uint64_t>(cls)));

        std::set<std::string> chosen;
        for (int k = 0; k < n_per_class; ++k)
            chosen.insert(*by_patient[patients[order[k]]].begin()); // one slide per patient
        for (auto& e : m.entries)
            if (chosen.count(e.slide_id)) e.split = Split::HELDOUT_WSI;
    }
    m.seed = seed;
    return m;
}

DatasetManifest balance_undersample(DatasetManifest m, uint64_t seed) {
    auto neg = eligible_indices(m, TileLabel::NON_PROGRESSOR);
    auto pos = eligible_indices(m, TileLabel::PROGRESSOR);
    if (neg.empty() || pos.empty())
        throw EmptyClass("balance: both classes must be present");
    m.provenance.pre_balance = {static_cast<int64_t>(neg.size()),
                                static_cast<int64_t>(pos.size())};
    size_t minority = std::min(neg.size(), pos.size());
    auto& majority = neg.size() > pos.size() ? neg : pos;
    if (majority.size() > minority) {
        seeded_shuffle(majority, hash_combine(seed, 0x62616cULL));
        for (size_t k = minority; k < majority.size(); ++k) {
            m.entries[majority[k]].split = Split::DISCARDED;
            m.entries[majority[k]].discard_reason = std::nullopt; // balance drop, not QC
        }
    }
    m.provenance.post_balance = {static_cast<int64_t>(minority),
                                 static_cast<int64_t>(minority)};
    return m;
}

DatasetManifest stratified_split(DatasetManifest m, std::array<double, 3> fractions,
                                 uint64_t seed) {
    if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9)
        throw DatasetError("stratified_split: fractions must sum to 1");
    m.fractions = fractions;
    for (int cls = 0; cls < 2; ++cls) {
        auto idx = eligible_indices(m, static_cast<TileLabel>(cls));
        size_t n = idx.size();
        size_t n_val = static_cast<size_t>(std::floor(fractions[1] * double(n)));
        size_t n_test = static_cast<size_t>(std::floor(fractions[2] * double(n)));
        size_t n_train = n - n_val - n_test;
        seeded_shuffle(idx, hash_combine(seed, 0x73706c6974ULL + cls));
        for (size_t k = 0; k < n; ++k) {
            Split s = k < n_train ? Split::TRAIN
                      : k < n_train + n_val ? Split::VAL
                                           : Split::TEST;
            m.entries[idx[k]].split = s;
        }
    }
    return m;
}

DatasetManifest filter_with_model(DatasetManifest m,
                                  const std::function<bool(const ManifestEntry&)>& keep) {
    for (auto& e : m.entries) {
        if (e.split == Split::DISCARDED) continue;
        if (!keep(e)) {
            e.split = Split::DISCARDED;
            e.discard_reason = RejectReason::ROI_MODEL;
        }
    }
    return m;
}

void save_manifest(const fs::path& path, const DatasetManifest& m) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    json header{{"seed", m.seed},
                {"fractions", m.fractions},
                {"provenance",
                 {{"pre_balance", m.provenance.pre_balance},
                  {"post_balance", m.provenance.post_balance}}}};
    out << header.dump() << "\n";
    fs::path base = path.parent_path();
    for (const auto& e : m.entries) {
        // store_dir goes out relative to the manifest so identically seeded
        // runs in different directories produce byte-identical manifests
        std::string store = e.store_dir;
        if (!store.empty() && !base.empty()) {
            fs::path rel = fs::path(store).lexically_normal().lexically_relative(
                base.lexically_normal());
            if (!rel.empty()) store = rel.generic_string();
        }
        json j{{"store_dir", store},
               {"record_index", e.record_index},
               {"slide_id", e.slide_id},
               {"patient_id", e.patient_id},
               {"grid_x", e.grid_x},
               {"grid_y", e.grid_y},
               {"label", static_cast<int>(e.label)},
               {"split", to_string(e.split)}};
        if (e.discard_reason) j["discard_reason"] = to_string(*e.discard_reason);
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("manifest write failed: " + path.string());
}

DatasetManifest load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw DatasetError(path.string() + ": empty manifest");
    DatasetManifest m;
    json header = json::parse(line);
    m.seed = header.at("seed").get<uint64_t>();
    m.fractions = header.at("fractions").get<std::array<double, 3>>();
    m.provenance.pre_balance =
        header.at("provenance").at("pre_balance").get<std::array<int64_t, 2>>();
    m.provenance.post_balance =
        header.at("provenance").at("post_balance").get<std::array<int64_t, 2>>();
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        ManifestEntry e;
        e.store_dir = j.at("store_dir").get<std::string>();
        if (!e.store_dir.empty() && fs::path(e.store_dir).is_relative())
            e.store_dir = (path.parent_path() / e.store_dir).lexically_normal().string();
        e.record_index = j.at("record_index").get<size_t>();
        e.slide_id = j.at("slide_id").get<std::string>();
        e.patient_id = j.at("patient_id").get<std::string>();
        e.grid_x = j.at("grid_x").get<int>();
        e.grid_y = j.at("grid_y").get<int>();
        e.label = static_cast<TileLabel>(j.at("label").get<int>());
        e.split = split_from_string(j.at("split").get<std::string>());
        if (j.contains("discard_reason"))
            e.discard_reason = reject_reason_from_string(j["discard_reason"].get<std::string>());
        m.entries.push_back(std::move(e));
    }
    return m;
}

// ---------------------------------------------------------------------------
// patients

std::vector<PatientRecord> load_patients_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<PatientRecord> out;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (first) { first = false; continue; } // header
        std::stringstream ss(line);
        std::string f[5];
        for (int i = 0; i < 5; ++i)
            if (!std::getline(ss, f[i], ','))
                throw DatasetError(path.string() + ": short row: " + line);
        PatientRecord p;
        p.patient_id = f[0];
        if (f[1] == "PROGRESSOR") p.cohort = TileLabel::PROGRESSOR;
        else if (f[1] == "NON_PROGRESSOR") p.cohort = TileLabel::NON_PROGRESSOR;
        else throw DatasetError(path.string() + ": unknown cohort " + f[1]);
        p.age_years = std::stoi(f[2]);
        p.n_biopsies = std::stoi(f[3]);
        p.screening_interval_days = std::stoi(f[4]);
        if (p.n_biopsies < 1 || p.screening_interval_days < 0)
            throw DatasetError(path.string() + ": invalid counts for " + p.patient_id);
        out.push_back(std::move(p));
    }
    return out;
}

void save_patients_csv(const fs::path& path, const std::vector<PatientRecord>& patients) {
    std::ofstream out(path, std::ios::trunc);
    out << "patient_id,cohort,age_years,n_biopsies,screening_interval_days\n";
    for (const auto& p : patients)
        out << p.patient_id << ','
            << (p.cohort == TileLabel::PROGRESSOR ? "PROGRESSOR" : "NON_PROGRESSOR") << ','
            << p.age_years << ',' << p.n_biopsies << ',' << p.screening_interval_days << "\n";
    if (!out) throw IoError("cannot write " + path.string());
}

namespace {

double round2(double v) { return std::round(v * 100.0) / 100.0; }

double median(std::vector<int> v) {
    std::sort(v.begin(), v.end());
    size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

} // namespace

std::map<TileLabel, CohortSummary> cohort_summary(const std::vector<PatientRecord>& patients) {
    std::map<TileLabel, std::vector<const PatientRecord*>> groups;
    for (const auto& p : patients) groups[p.cohort].push_back(&p);
    if (groups.empty()) throw EmptyCohort("cohort_summary: no patients");
    std::map<TileLabel, CohortSummary> out;
    for (const auto& [label, ps] : groups) {
        if (ps.empty()) throw EmptyCohort("cohort_summary: empty cohort");
        CohortSummary s;
        std::vector<int> ages;
        double biopsies = 0, interval = 0;
        for (const auto* p : ps) {
            ages.push_back(p->age_years);
            biopsies += p->n_biopsies;
            interval += p->screening_interval_days;
        }
        s.median_age = median(ages);
        s.age_min = *std::min_element(ages.begin(), ages.end());
        s.age_max = *std::max_element(ages.begin(), ages.end());
        s.mean_biopsies = round2(biopsies / double(ps.size()));
        s.mean_interval_days = round2(interval / double(ps.size()));
        out[label] = s;
    }
    return out;
}

} // namespace tileforge
