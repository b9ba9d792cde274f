// Word-level diff for the original-vs-candidate review pane.
//
// Coloring convention: text shared with the original is "source" material,
// text only in the candidate was introduced during reconstruction. CJK
// runs are split per character so Chinese edits diff at a useful grain.

export type SpanKind = "common" | "added" | "removed";

export interface DiffSpan {
  kind: SpanKind;
  text: string;
}

const TOKEN_PATTERN = /([一-鿿])|([A-Za-z0-9]+)|(\s+)|([^\s])/gu;

export function tokenize(text: string): string[] {
  const tokens: string[] = [];
  for (const match of text.matchAll(TOKEN_PATTERN)) {
    tokens.push(match[0]);
  }
  return tokens;
}

function lcsTable(a: string[], b: string[]): number[][] {
  const table: number[][] = Array.from({ length: a.length + 1 }, () =>
    new Array<number>(b.length + 1).fill(0),
  );
  for (let i = a.length - 1; i >= 0; i--) {
    const row = table[i]!;
    const next = table[i + 1]!;
    for (let j = b.length - 1; j >= 0; j--) {
      row[j] = a[i] === b[j] ? next[j + 1]! + 1 : Math.max(next[j]!, row[j + 1]!);
    }
  }
  return table;
}

function mergeSpans(spans: DiffSpan[]): DiffSpan[] {
  const merged: DiffSpan[] = [];
  for (const span of spans) {
    const last = merged[merged.length - 1];
    if (last && last.kind === span.kind) {
      last.text += span.text;
    } else {
      merged.push({ ...span });
    }
  }
  return merged;
}

/** Diff two texts into aligned span lists for the original and candidate panes. */
export function diffTexts(original: string, candidate: string): {
  original: DiffSpan[];
  candidate: DiffSpan[];
} {
  const a = tokenize(original);
  const b = tokenize(candidate);
  const table = lcsTable(a, b);
  const originalSpans: DiffSpan[] = [];
  const candidateSpans: DiffSpan[] = [];
  let i = 0;
  let j = 0;
  while (i < a.length && j < b.length) {
    if (a[i] === b[j]) {
      originalSpans.push({ kind: "common", text: a[i]! });
      candidateSpans.push({ kind: "common", text: b[j]! });
      i++;
      j++;
    } else if (table[i + 1]![j]! >= table[i]![j + 1]!) {
      originalSpans.push({ kind: "removed", text: a[i]! });
      i++;
    } else {
      candidateSpans.push({ kind: "added", text: b[j]! });
      j++;
    }
  }
  while (i < a.length) originalSpans.push({ kind: "removed", text: a[i++]! });
  while (j < b.length) candidateSpans.push({ kind: "added", text: b[j++]! });
  return { original: mergeSpans(originalSpans), candidate: mergeSpans(candidateSpans) };
}

/** Share of candidate characters that came from the original (ignoring spaces). */
export function sourceShare(spans: DiffSpan[]): number {
  let common = 0;
  let total = 0;
  for (const span of spans) {
    const size = span.text.replace(/\s+/g, "").length;
    total += size;
    if (span.kind === "common") common += size;
  }
  return total === 0 ? 1 : common / total;
}
