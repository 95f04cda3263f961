#include "smartstate/gateway.h"

#include "smartstate/protocol.h"

namespace smartstate::gateway {

namespace {

void at_point(const CrashHook& crash, std::string_view point) {
  if (crash) crash(point);
}

}  // namespace

absl::Duration retry_backoff(int attempts) {
  absl::Duration d = absl::Seconds(1);
  for (int i = 1; i < attempts; ++i) d *= 4;
  return d;
}

EnqueueStatus enqueue_outbound(store::Store& store, const runtime::ActionEffect& effect, const std::string& handle,
                               absl::Time now) {
  const auto leftover = protocol::template_placeholders(effect.body);
  if (!leftover.empty()) {
    store::AuditRecord fault;
    fault.at = now;
    fault.actor = std::string(store::kSystemActor);
    fault.kind = std::string(store::audit_kind::kFault);
    fault.participant_id = effect.participant_id;
    fault.payload = {{"error", "UNRESOLVED_PLACEHOLDER"},
                     {"placeholder", leftover.front()},
                     {"template", effect.template_id},
                     {"key", effect.idempotency_key}};
    store.append_audit(fault);
    return EnqueueStatus::Faulted;
  }
  store::OutboxItem item;
  item.idempotency_key = effect.idempotency_key;
  item.participant_id = effect.participant_id;
  item.handle = handle;
  item.body = effect.body;
  item.template_id = effect.template_id;
  item.reply_class = runtime::to_string(effect.reply_class);
  item.trigger = effect.trigger;
  item.next_attempt_at = now;
  return store.enqueue_outbox(item) ? EnqueueStatus::Queued : EnqueueStatus::Duplicate;
}

PumpStats pump(store::Store& store, Provider& provider, absl::Time now, const CrashHook& crash) {
  PumpStats stats;
  for (auto item : store.due_outbox(now)) {
    ++stats.attempted;
    at_point(crash, "pump.before_send");
    const auto result = provider.send(item.handle, item.body, item.idempotency_key);
    at_point(crash, "pump.after_send");
    store::Store::Transaction txn(store);
    ++item.attempts;
    if (result.ok) {
      item.status = "delivered";
      item.last_error.clear();
      store::AuditRecord rec;
      rec.at = now;
      rec.actor = std::string(store::kSystemActor);
      rec.kind = std::string(store::audit_kind::kMsgOut);
      rec.participant_id = item.participant_id;
      rec.payload = {{"key", item.idempotency_key},  {"template", item.template_id}, {"reply_class", item.reply_class},
                     {"trigger", item.trigger},       {"attempts", item.attempts},    {"provider", provider.name()}};
      const auto seq = store.append_audit(rec);
      store::StoredMessage msg;
      msg.direction = "out";
      msg.participant_id = item.participant_id;
      msg.handle = item.handle;
      msg.body = item.body;
      msg.at = now;
      msg.idempotency_key = item.idempotency_key;
      msg.template_id = item.template_id;
      msg.reply_class = item.reply_class;
      msg.audit_seq = seq;
      store.insert_message(msg);
      ++stats.delivered;
    } else if (item.attempts >= kMaxDeliveryAttempts) {
      item.status = "failed";
      item.last_error = result.error;
      store::AuditRecord fault;
      fault.at = now;
      fault.actor = std::string(store::kSystemActor);
      fault.kind = std::string(store::audit_kind::kFault);
      fault.participant_id = item.participant_id;
      fault.payload = {{"error", "DELIVERY_FAILED"},
                       {"key", item.idempotency_key},
                       {"attempts", item.attempts},
                       {"detail", result.error}};
      store.append_audit(fault);
      ++stats.failed;
    } else {
      item.last_error = result.error;
      item.next_attempt_at = now + retry_backoff(item.attempts);
      ++stats.retried;
    }
    store.update_outbox(item);
    txn.commit();
    at_point(crash, "pump.after_commit");
  }
  return stats;
}

}  // namespace smartstate::gateway
