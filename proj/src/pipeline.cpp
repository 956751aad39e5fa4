#include "edr/pipeline.hpp"

#include <algorithm>

namespace edr::pipeline {

using detect::Detection;
using events::SystemEvent;

void PipelineOptions::validate() const {
  ingest.validate();
  weights.validate();
  if (frequency_threshold == 0) throw Error("pipeline.frequency_threshold must be positive");
  if (alert_group_ms <= 0) throw Error("pipeline.alert_group_sec must be positive");
  if (!(anomaly_threshold > 0.0 && anomaly_threshold < 1.0)) {
    throw Error("pipeline.anomaly_threshold must lie in (0, 1)");
  }
  if (!(tiers.medium < tiers.high && tiers.high < tiers.critical && tiers.medium > 0.0 &&
        tiers.critical <= 1.0)) {
    throw Error("risk_tiers must satisfy 0 < medium < high < critical <= 1");
  }
}

PipelineOptions PipelineOptions::from_json(const nlohmann::json& obj) {
  PipelineOptions o;
  const auto seconds = [](double s) { return static_cast<TimestampMs>(s * 1000.0); };
  if (auto it = obj.find("pipeline"); it != obj.end()) {
    const auto& p = *it;
    o.ingest.window_ms = seconds(p.value("window_sec", 60.0));
    o.ingest.max_window_events = p.value("max_window_events", o.ingest.max_window_events);
    o.ingest.dedup_horizon_ms = seconds(p.value("dedup_horizon_sec", 5.0));
    if (p.contains("replay_rate") && p.at("replay_rate").is_number()) {
      o.ingest.replay_rate = p.at("replay_rate").get<double>();
    }
    o.frequency_threshold = p.value("frequency_threshold", o.frequency_threshold);
    o.alert_group_ms = seconds(p.value("alert_group_sec", 60.0));
    o.anomaly_threshold = p.value("anomaly_threshold", o.anomaly_threshold);
    o.classifier_enabled = p.value("classifier_enabled", o.classifier_enabled);
  }
  if (auto it = obj.find("risk_weights"); it != obj.end()) {
    o.weights = risk::RiskWeights::from_json(*it);
  }
  if (auto it = obj.find("risk_tiers"); it != obj.end()) {
    o.tiers.medium = it->value("medium", o.tiers.medium);
    o.tiers.high = it->value("high", o.tiers.high);
    o.tiers.critical = it->value("critical", o.tiers.critical);
  }
  return o;
}

Pipeline::Pipeline(Components components, PipelineOptions options,
                   std::shared_ptr<respond::ResponseOrchestrator> orchestrator)
    : components_(std::move(components)),
      options_(std::move(options)),
      orchestrator_(std::move(orchestrator)),
      classifier_(components_.classifier, options_.classifier_enabled) {
  options_.validate();
  if (!components_.taxonomy) throw Error("pipeline needs a taxonomy");
  if (!components_.rules) components_.rules = std::make_shared<detect::RuleSet>();
  if (!components_.profiles) components_.profiles = std::make_shared<risk::ProfileDirectory>();
  if (components_.forest && components_.forest->feature_count() != events::kFeatureCount) {
    throw Error("anomaly model expects a different feature count");
  }
}

Pipeline::AgentState& Pipeline::agent_state(const std::string& agent_id) {
  std::lock_guard lock(agents_mu_);
  auto& slot = agents_[agent_id];
  if (!slot) slot = std::make_unique<AgentState>(options_.ingest);
  return *slot;
}

EventOutcome Pipeline::process(const SystemEvent& e) {
  const auto started = std::chrono::steady_clock::now();
  auto& st = agent_state(e.agent_id);
  std::lock_guard lock(st.mu);
  EventOutcome out;
  ++st.counters.read;

  out.verdict = ingest::noise_filter(e, options_.ingest.noise_rules);
  if (!out.verdict.keep) {
    ++st.counters.dropped_noise;
    return out;
  }
  out.verdict = st.window.dedup(e);
  if (!out.verdict.keep) {
    ++st.counters.dropped_dup;
    return out;
  }
  ++st.counters.kept;
  out.late = !st.window.update(e);
  if (!out.late) st.first_ts = st.first_ts ? std::min(*st.first_ts, e.ts) : e.ts;

  if (out.late) {
    out.detections = detect::match_signatures(e, components_.rules->signatures);
  } else {
    out.detections = detect(st, e, out.anomaly_score);
  }
  if (out.detections.empty()) return out;
  out.alert_ids = attach(st, e, out.detections, out.anomaly_score.value_or(0.0), started);
  return out;
}

std::vector<Detection> Pipeline::detect(AgentState& st, const SystemEvent& e,
                                        std::optional<double>& anomaly) {
  auto found = detect::match_signatures(e, components_.rules->signatures);
  auto correlated = st.matcher.match(st.window, components_.rules->correlations);
  found.insert(found.end(), std::make_move_iterator(correlated.begin()),
               std::make_move_iterator(correlated.end()));

  auto classified = classifier_.run(st.window);
  if (classified.degraded) {
    std::lock_guard lock(alerts_mu_);
    degraded_ = true;
  }
  found.insert(found.end(), std::make_move_iterator(classified.detections.begin()),
               std::make_move_iterator(classified.detections.end()));

  const bool warmed = st.first_ts && e.ts - *st.first_ts >= options_.ingest.window_ms;
  const auto model = forest();
  if (warmed && model && !model->empty()) {
    const auto& ring = st.window.ring();
    std::vector<const SystemEvent*> view;
    view.reserve(ring.size());
    for (const auto& x : ring) view.push_back(&x);
    const auto fv = events::extract_features(std::span<const SystemEvent* const>(view),
                                             options_.ingest.window_ms, options_.features);
    const double s = model->score(fv.values);
    anomaly = s;
    // One detection per episode: only the crossing into the anomalous range.
    const bool crossing = s >= options_.anomaly_threshold && !st.anomalous;
    st.anomalous = s >= options_.anomaly_threshold;
    if (crossing) {
      Detection d;
      d.engine = detect::Engine::anomaly;
      d.score = s;
      for (auto& t : classifier_.tags(fv)) {
        if (components_.taxonomy->lookup_technique(t)) d.technique_ids.push_back(std::move(t));
      }
      d.evidence = {e.id};
      d.ts = e.ts;
      d.agent_id = e.agent_id;
      d.rule_id = "iforest";
      d.severity = s >= 0.8 ? Level::high : Level::medium;
      found.push_back(std::move(d));
    }
  }
  return found;
}

void Pipeline::set_forest(std::shared_ptr<const detect::IsolationForest> forest) {
  if (forest && forest->feature_count() != events::kFeatureCount) {
    throw Error("anomaly model expects a different feature count");
  }
  std::lock_guard lock(components_mu_);
  components_.forest = std::move(forest);
}

void Pipeline::set_profiles(std::shared_ptr<const risk::ProfileDirectory> profiles) {
  if (!profiles) profiles = std::make_shared<risk::ProfileDirectory>();
  std::lock_guard lock(components_mu_);
  components_.profiles = std::move(profiles);
}

std::shared_ptr<const detect::IsolationForest> Pipeline::forest() const {
  std::lock_guard lock(components_mu_);
  return components_.forest;
}

std::shared_ptr<const risk::ProfileDirectory> Pipeline::profiles() const {
  std::lock_guard lock(components_mu_);
  return components_.profiles;
}

void Pipeline::update_factors(Alert& alert, const AgentState& st, const Detection& d,
                              double anomaly, const risk::ProfileDirectory& profiles) const {
  auto& f = alert.factors;
  const auto& tax = *components_.taxonomy;
  f.anomaly_score = std::max(f.anomaly_score, std::clamp(anomaly, 0.0, 1.0));
  if (d.engine == detect::Engine::anomaly) f.anomaly_score = std::max(f.anomaly_score, d.score);
  f.frequency_score = std::max(
      f.frequency_score, risk::frequency_score(st.window.ring().size(), options_.frequency_threshold));
  std::optional<Level> impact;
  for (const auto& t : d.technique_ids) {
    if (const auto* tech = tax.lookup_technique(t)) {
      impact = impact ? std::max(*impact, tech->impact) : tech->impact;
    }
  }
  f.severity_score = std::max(f.severity_score, risk::severity_score(d.severity, impact));
  f.asset_criticality = profiles.asset_criticality(alert.agent_id);
}

std::vector<std::string> Pipeline::attach(AgentState& st, const SystemEvent& e,
                                          std::vector<Detection>& detections, double anomaly,
                                          std::chrono::steady_clock::time_point started) {
  const auto& ring = st.window.ring();
  auto find_event = [&](const std::string& id) -> const SystemEvent* {
    if (e.id == id) return &e;
    for (auto it = ring.rbegin(); it != ring.rend(); ++it) {
      if (it->id == id) return &*it;
    }
    return nullptr;
  };

  const auto directory = profiles();
  std::vector<std::string> touched;
  std::unique_lock lock(alerts_mu_);
  detections_total_ += detections.size();
  for (auto& d : detections) {
    Alert* alert = nullptr;
    if (st.current_alert) {
      auto& candidate = alerts_.at(*st.current_alert);
      if (d.ts >= candidate.created_ts - options_.alert_group_ms &&
          d.ts <= candidate.created_ts + options_.alert_group_ms &&
          candidate.status == AlertStatus::open) {
        alert = &candidate;
      }
    }
    if (!alert) {
      char suffix[16];
      std::snprintf(suffix, sizeof suffix, "%06zu", ++st.alert_seq);
      Alert fresh;
      fresh.id = options_.alert_prefix + "-" + e.agent_id + "-" + suffix;
      fresh.agent_id = e.agent_id;
      fresh.created_ts = d.ts;
      fresh.updated_ts = d.ts;
      fresh.weights = options_.weights;
      fresh.source = "pipeline";
      const auto id = fresh.id;
      alerts_.emplace(id, std::move(fresh));
      alert_order_.push_back(id);
      timing_[id].first_detection = started;
      st.current_alert = id;
      alert = &alerts_.at(id);
    }

    // Anomaly evidence marks where a window turned unusual, not what is
    // hostile, so it does not feed response targets.
    for (const auto& id : d.evidence) {
      if (d.engine == detect::Engine::anomaly) break;
      if (const auto* ev = find_event(id)) {
        alert->entities.absorb(*ev);
        if (!ev->subject.user.empty()) {
          alert->factors.user_risk =
              std::max(alert->factors.user_risk, directory->user_risk(ev->subject.user));
        }
      }
    }
    for (const auto& t : d.technique_ids) {
      if (std::find(alert->technique_ids.begin(), alert->technique_ids.end(), t) ==
          alert->technique_ids.end()) {
        alert->technique_ids.push_back(t);
      }
    }
    std::sort(alert->technique_ids.begin(), alert->technique_ids.end());
    update_factors(*alert, st, d, anomaly, *directory);
    alert->updated_ts = std::max(alert->updated_ts, d.ts);
    alert->detections.push_back(d);
    alert->rescore(options_.tiers);
    dirty_.insert(alert->id);
    if (std::find(touched.begin(), touched.end(), alert->id) == touched.end()) {
      touched.push_back(alert->id);
    }
  }

  if (orchestrator_) {
    for (const auto& id : touched) {
      const Alert snapshot = alerts_.at(id);
      lock.unlock();
      auto outcome = orchestrator_->handle_alert(snapshot, clock_());
      const auto finished = std::chrono::steady_clock::now();
      lock.lock();
      auto& timing = timing_[id];
      const bool executed = std::any_of(outcome.results.begin(), outcome.results.end(),
                                        [](const auto& r) { return r.success; });
      if (executed && !timing.responded) {
        timing.responded = true;
        latency_ms_.push_back(
            std::chrono::duration<double, std::milli>(finished - timing.first_detection).count());
      }
    }
  }
  return touched;
}

void Pipeline::note_skipped(std::size_t n) {
  std::lock_guard lock(alerts_mu_);
  skipped_ += n;
}

ingest::IngestCounters Pipeline::counters() const {
  ingest::IngestCounters total;
  {
    std::lock_guard lock(agents_mu_);
    for (const auto& [id, st] : agents_) {
      std::lock_guard agent_lock(st->mu);
      total.read += st->counters.read;
      total.kept += st->counters.kept;
      total.dropped_noise += st->counters.dropped_noise;
      total.dropped_dup += st->counters.dropped_dup;
    }
  }
  std::lock_guard lock(alerts_mu_);
  total.read += skipped_;
  total.skipped = skipped_;
  return total;
}

std::size_t Pipeline::late_dropped() const {
  std::lock_guard lock(agents_mu_);
  std::size_t n = 0;
  for (const auto& [id, st] : agents_) {
    std::lock_guard agent_lock(st->mu);
    n += st->window.late_dropped();
  }
  return n;
}

std::vector<Alert> Pipeline::alerts() const {
  std::lock_guard lock(alerts_mu_);
  std::vector<Alert> out;
  out.reserve(alert_order_.size());
  for (const auto& id : alert_order_) out.push_back(alerts_.at(id));
  return out;
}

std::optional<Alert> Pipeline::find_alert(const std::string& id) const {
  std::lock_guard lock(alerts_mu_);
  auto it = alerts_.find(id);
  if (it == alerts_.end()) return std::nullopt;
  return it->second;
}

std::vector<Alert> Pipeline::take_updates() {
  std::lock_guard lock(alerts_mu_);
  std::vector<Alert> out;
  for (const auto& id : alert_order_) {
    if (dirty_.contains(id)) out.push_back(alerts_.at(id));
  }
  dirty_.clear();
  return out;
}

std::vector<double> Pipeline::latency_samples_ms() const {
  std::lock_guard lock(alerts_mu_);
  return latency_ms_;
}

std::size_t Pipeline::detections_total() const {
  std::lock_guard lock(alerts_mu_);
  return detections_total_;
}

bool Pipeline::classifier_degraded() const {
  std::lock_guard lock(alerts_mu_);
  return degraded_;
}

nlohmann::json Pipeline::state_to_json() const {
  nlohmann::json agents = nlohmann::json::object();
  {
    std::lock_guard lock(agents_mu_);
    for (const auto& [id, st] : agents_) {
      std::lock_guard agent_lock(st->mu);
      agents[id] = {{"window", st->window.to_json()},
                    {"matcher", st->matcher.to_json()},
                    {"current_alert", st->current_alert ? nlohmann::json(*st->current_alert)
                                                        : nlohmann::json()},
                    {"alert_seq", st->alert_seq},
                    {"first_ts", st->first_ts ? nlohmann::json(*st->first_ts) : nlohmann::json()},
                    {"anomalous", st->anomalous},
                    {"counters",
                     {{"read", st->counters.read},
                      {"kept", st->counters.kept},
                      {"dropped_noise", st->counters.dropped_noise},
                      {"dropped_dup", st->counters.dropped_dup}}}};
    }
  }
  std::lock_guard lock(alerts_mu_);
  auto alerts = nlohmann::json::array();
  for (const auto& id : alert_order_) alerts.push_back(to_json(alerts_.at(id)));
  return {{"agents", agents},
          {"alerts", alerts},
          {"detections_total", detections_total_},
          {"skipped", skipped_}};
}

void Pipeline::restore(const nlohmann::json& state) {
  {
    std::lock_guard lock(agents_mu_);
    agents_.clear();
    for (const auto& [id, a] : state.at("agents").items()) {
      auto st = std::make_unique<AgentState>(options_.ingest);
      st->window = ingest::WindowStats::from_json(a.at("window"));
      st->matcher.restore(a.at("matcher"));
      if (!a.at("current_alert").is_null()) st->current_alert = a.at("current_alert").get<std::string>();
      st->alert_seq = a.at("alert_seq").get<std::size_t>();
      st->anomalous = a.value("anomalous", false);
      if (a.contains("first_ts") && !a.at("first_ts").is_null()) {
        st->first_ts = a.at("first_ts").get<TimestampMs>();
      }
      const auto& c = a.at("counters");
      st->counters.read = c.at("read").get<std::size_t>();
      st->counters.kept = c.at("kept").get<std::size_t>();
      st->counters.dropped_noise = c.at("dropped_noise").get<std::size_t>();
      st->counters.dropped_dup = c.at("dropped_dup").get<std::size_t>();
      agents_[id] = std::move(st);
    }
  }
  std::lock_guard lock(alerts_mu_);
  alerts_.clear();
  alert_order_.clear();
  dirty_.clear();
  timing_.clear();
  for (const auto& a : state.at("alerts")) {
    auto alert = alert_from_json(a);
    alert_order_.push_back(alert.id);
    timing_[alert.id].responded = true;
    alerts_.emplace(alert.id, std::move(alert));
  }
  detections_total_ = state.value("detections_total", std::size_t{0});
  skipped_ = state.value("skipped", std::size_t{0});
}

}  // namespace edr::pipeline
