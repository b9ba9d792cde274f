// DOM layer: renders controller state, wires events back into controllers.

import type {
  DashboardController,
  GenerationController,
  QueueController,
  ReviewController,
} from "./controllers.js";
import { diffTexts } from "./diff.js";
import type { DiffSpan } from "./diff.js";
import type { ItemState } from "./types.js";

const STATES: (ItemState | "")[] = ["", "pending", "accepted", "edited", "rejected", "promoted_exemplar"];

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className = "",
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text) node.textContent = text;
  return node;
}

function spansToFragment(spans: DiffSpan[], paneKind: "original" | "candidate"): DocumentFragment {
  const fragment = document.createDocumentFragment();
  for (const span of spans) {
    const node = el("span");
    node.textContent = span.text;
    if (span.kind === "common") {
      node.className = "diff-source";
    } else if (span.kind === "added") {
      node.className = "diff-introduced";
    } else {
      node.className = paneKind === "original" ? "diff-dropped" : "diff-source";
    }
    fragment.appendChild(node);
  }
  return fragment;
}

export function renderQueue(
  container: HTMLElement,
  queue: QueueController,
  onOpen: (id: string) => void,
): void {
  container.replaceChildren();

  const controls = el("div", "queue-controls");
  const stateSelect = el("select", "state-filter");
  for (const state of STATES) {
    const option = el("option", "", state === "" ? "all states" : state);
    option.value = state;
    if (queue.filters.state === state || (!queue.filters.state && state === "")) {
      option.selected = true;
    }
    stateSelect.appendChild(option);
  }
  stateSelect.addEventListener("change", () => {
    void queue.setStateFilter(stateSelect.value as ItemState | "").then(() =>
      renderQueue(container, queue, onOpen),
    );
  });
  controls.appendChild(stateSelect);

  const departmentInput = el("input", "department-filter");
  departmentInput.placeholder = "department filter";
  departmentInput.value = queue.filters.department ?? "";
  departmentInput.addEventListener("change", () => {
    void queue.setDepartmentFilter(departmentInput.value.trim()).then(() =>
      renderQueue(container, queue, onOpen),
    );
  });
  controls.appendChild(departmentInput);

  const pager = el("span", "pager", `${queue.page.offset}–${queue.page.offset + queue.page.items.length} of ${queue.page.total}`);
  const prev = el("button", "", "prev");
  const next = el("button", "", "next");
  prev.addEventListener("click", () => {
    void queue.turnPage(-1).then(() => renderQueue(container, queue, onOpen));
  });
  next.addEventListener("click", () => {
    void queue.turnPage(1).then(() => renderQueue(container, queue, onOpen));
  });
  controls.append(prev, pager, next);
  container.appendChild(controls);

  if (queue.error) {
    container.appendChild(el("div", "error-banner", `queue error: ${queue.error}`));
  }

  const table = el("table", "queue-table");
  const head = el("tr");
  for (const title of ["id", "state", "department", "rounds", "preview"]) {
    head.appendChild(el("th", "", title));
  }
  table.appendChild(head);
  for (const item of queue.page.items) {
    const row = el("tr", `queue-row state-${item.state}`);
    row.dataset.itemId = item.id;
    row.appendChild(el("td", "cell-id", item.id));
    row.appendChild(el("td", "cell-state", item.state));
    row.appendChild(el("td", "", item.department ?? ""));
    row.appendChild(el("td", "", String(item.rounds)));
    row.appendChild(el("td", "cell-preview", item.preview));
    row.addEventListener("click", () => onOpen(item.id));
    table.appendChild(row);
  }
  container.appendChild(table);
}

export function renderReview(container: HTMLElement, review: ReviewController, onDone: () => void): void {
  container.replaceChildren();
  const item = review.item;
  if (!item) {
    container.appendChild(el("div", "placeholder", "select an item from the queue"));
    return;
  }

  container.appendChild(el("h3", "", `${item.id} — ${item.state}`));
  if (review.error) {
    container.appendChild(el("div", "error-banner conflict", review.error));
  }

  const original = item.original ?? item.candidate;
  const panes = el("div", "review-panes");
  const originalPane = el("div", "pane pane-original");
  originalPane.appendChild(el("h4", "", "original"));
  const candidatePane = el("div", "pane pane-candidate");
  candidatePane.appendChild(el("h4", "", "candidate (editable)"));

  item.candidate.turns.forEach((turn, index) => {
    const originalTurn = original.turns[index];
    const diff = diffTexts(originalTurn ? originalTurn.content : "", turn.content);

    const left = el("div", `turn turn-${originalTurn ? originalTurn.role : "missing"}`);
    if (originalTurn) {
      left.appendChild(el("div", "turn-role", originalTurn.role));
      const body = el("div", "turn-body");
      body.appendChild(spansToFragment(diff.original, "original"));
      left.appendChild(body);
    }
    originalPane.appendChild(left);

    const right = el("div", `turn turn-${turn.role}`);
    right.appendChild(el("div", "turn-role", turn.role));
    const highlight = el("div", "turn-body");
    highlight.appendChild(spansToFragment(diff.candidate, "candidate"));
    right.appendChild(highlight);

    const editor = el("textarea", "turn-editor");
    editor.value = review.buffer[index] ?? turn.content;
    editor.rows = 3;
    editor.dataset.turnIndex = String(index);
    editor.addEventListener("input", () => review.editTurn(index, editor.value));
    right.appendChild(editor);
    candidatePane.appendChild(right);
  });
  panes.append(originalPane, candidatePane);
  container.appendChild(panes);

  const actions = el("div", "review-actions");
  const buttons: [string, () => Promise<void>][] = [
    ["accept", async () => void (await review.submit(review.dirty() ? "edit" : "accept"))],
    ["save edit", async () => void (await review.submit("edit"))],
    ["reject", async () => void (await review.submit("reject"))],
    ["promote", async () => void (await review.submit("promote"))],
  ];
  for (const [label, handler] of buttons) {
    const button = el("button", `action-${label.replace(" ", "-")}`, label);
    button.addEventListener("click", () => {
      void handler().then(() => {
        renderReview(container, review, onDone);
        onDone();
      });
    });
    actions.appendChild(button);
  }
  container.appendChild(actions);
}

export function renderDashboard(
  container: HTMLElement,
  dashboard: DashboardController,
  generation: GenerationController,
  onGenerated: () => void,
): void {
  container.replaceChildren();
  if (dashboard.offline) {
    container.appendChild(el("div", "error-banner offline", "API unreachable — working offline"));
    return;
  }
  const stats = dashboard.stats;
  if (!stats) return;

  const counts = el("div", "stat-counts");
  for (const [state, count] of Object.entries(stats.counts)) {
    const chip = el("span", `stat-chip stat-${state}`);
    chip.appendChild(el("b", "", String(count)));
    chip.appendChild(el("span", "", ` ${state}`));
    counts.appendChild(chip);
  }
  container.appendChild(counts);
  container.appendChild(
    el(
      "div",
      "stat-progress",
      `decided ${stats.decided} of ${stats.total} · last hour ${stats.decisions_last_hour} · ` +
        `remaining to ${stats.target}: ${stats.remaining_to_target}`,
    ),
  );

  const form = el("div", "generate-form");
  const targetInput = el("input", "generate-target");
  targetInput.type = "number";
  targetInput.value = "10";
  const trigger = el("button", "generate-trigger", "generate batch");
  trigger.addEventListener("click", () => {
    const target = Number(targetInput.value) || 0;
    void generation.trigger(target, 3, Date.now() % 100000).then(() => {
      renderDashboard(container, dashboard, generation, onGenerated);
      onGenerated();
    });
  });
  form.append(targetInput, trigger);
  if (generation.error) {
    form.appendChild(el("span", "error-inline", generation.error));
  } else if (generation.lastResult) {
    form.appendChild(
      el("span", "generate-result",
         `created ${generation.lastResult.created}, quarantined ${generation.lastResult.quarantined}`),
    );
  }
  container.appendChild(form);
}
