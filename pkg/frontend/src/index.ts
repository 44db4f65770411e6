export * from "./logs.js";
export * from "./svg.js";
export * from "./figures.js";
