#include "par/layout.hpp"

#include <string>

namespace par {

int SequenceLayout::targeted_count() const {
  int c = 0;
  for (int t : target_of) c += t >= 0 ? 1 : 0;
  return c;
}

int SequenceLayout::held_position(int slot) const {
  const Slot& s = slots.at(slot);
  const bool prefix = plan.options.sequential_prefix;
  switch (s.kind) {
    case SlotKind::Token:
      return s.index;
    case SlotKind::Transition:
      return prefix ? s.index : s.index - n;
    case SlotKind::Label:
      return prefix ? -1 : -n;
  }
  return 0;
}

SequenceLayout build_sequence_layout(const OrderPlan& plan) {
  SequenceLayout layout;
  layout.plan = plan;
  const int n = plan.n;
  const int total = plan.token_count();
  layout.n = n;

  auto push = [&](SlotKind kind, int index, int target) {
    layout.slots.push_back(Slot{kind, index});
    layout.target_of.push_back(target < total ? target : -1);
  };
  auto add_group = [&](int begin, int end) { layout.groups.push_back(SlotRange{begin, end}); };

  if (plan.options.sequential_prefix) {
    push(SlotKind::Label, 0, 0);
    add_group(0, 1);
    for (int j = 0; j + 1 < n; ++j) {
      push(SlotKind::Token, j, j + 1);
      add_group(layout.slot_count() - 1, layout.slot_count());
    }
    const int transition_begin = layout.slot_count();
    push(SlotKind::Token, n - 1, n);
    for (int i = 1; i < n; ++i) push(SlotKind::Transition, i, n + i);
    add_group(transition_begin, layout.slot_count());
    for (int j = n; j < total; j += n) {
      const int begin = layout.slot_count();
      for (int i = j; i < j + n; ++i) push(SlotKind::Token, i, i + n);
      add_group(begin, layout.slot_count());
    }
  } else {
    push(SlotKind::Label, 0, 0);
    for (int i = 1; i < n; ++i) push(SlotKind::Transition, i, i);
    add_group(0, layout.slot_count());
    for (int j = 0; j < total; j += n) {
      const int begin = layout.slot_count();
      for (int i = j; i < j + n; ++i) push(SlotKind::Token, i, i + n);
      add_group(begin, layout.slot_count());
    }
  }

  layout.group_of.assign(layout.slot_count(), -1);
  for (int g = 0; g < layout.group_count(); ++g)
    for (int s = layout.groups[g].begin; s < layout.groups[g].end; ++s) layout.group_of[s] = g;
  return layout;
}

AttentionMask AttentionMask::prefix(int p) const {
  if (p < 0 || p > size_) throw std::out_of_range("mask prefix " + std::to_string(p));
  AttentionMask out(p);
  for (int q = 0; q < p; ++q)
    for (int k = 0; k < p; ++k) out.set(q, k, visible(q, k));
  return out;
}

AttentionMask causal_mask(int size) {
  AttentionMask mask(size);
  for (int q = 0; q < size; ++q)
    for (int k = 0; k <= q; ++k) mask.set(q, k, true);
  return mask;
}

AttentionMask build_attention_mask(const SequenceLayout& layout, MaskPattern pattern) {
  const int size = layout.slot_count();
  if (pattern == MaskPattern::Causal) return causal_mask(size);
  AttentionMask mask(size);
  for (int q = 0; q < size; ++q) {
    // Groups are contiguous, so visibility is a prefix ending at q's group end.
    const int end = layout.groups[layout.group_of[q]].end;
    for (int k = 0; k < end; ++k) mask.set(q, k, true);
  }
  return mask;
}

std::vector<MaskViolation> verify_mask(const AttentionMask& mask, const SequenceLayout& layout) {
  const int size = layout.slot_count();
  if (mask.size() != size) {
    throw std::invalid_argument("mask size " + std::to_string(mask.size()) +
                                " does not match layout slot count " + std::to_string(size));
  }
  auto group_index = [&](int slot) {
    for (int g = 0; g < layout.group_count(); ++g)
      if (layout.groups[g].contains(slot)) return g;
    throw std::invalid_argument("slot " + std::to_string(slot) + " is in no attention group");
  };
  std::vector<int> gid(size);
  for (int s = 0; s < size; ++s) gid[s] = group_index(s);

  std::vector<MaskViolation> out;
  for (int q = 0; q < size; ++q) {
    for (int k = 0; k < size; ++k) {
      const bool expected = gid[k] <= gid[q];
      const bool actual = mask.visible(q, k);
      if (expected != actual) out.push_back(MaskViolation{q, k, expected, actual});
    }
  }
  return out;
}

}  // namespace par
